//! Core domain types shared by every stage of the pipeline.

mod feature;
mod io;

pub use feature::{AxisKind, FeatureVolume};
pub use io::{
    load_dataset, read_sample, write_manifest, write_sample, Dataset, DatasetManifest,
    ManifestEntry, Split, FORMAT_VERSION,
};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Rows in the day-of-year positional table.
pub const DAYS_IN_YEAR: usize = 365;

pub const HR_CHANNELS: usize = 3;
pub const MS_CHANNELS: usize = 10;
pub const SAR_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "HR")]
    Hr,
    #[serde(rename = "Ms")]
    Ms,
    #[serde(rename = "SAR")]
    Sar,
}

impl Modality {
    /// Concatenation order of the temporal axis.
    pub const ALL: [Modality; 3] = [Modality::Hr, Modality::Ms, Modality::Sar];

    pub fn channels(self) -> usize {
        match self {
            Modality::Hr => HR_CHANNELS,
            Modality::Ms => MS_CHANNELS,
            Modality::Sar => SAR_CHANNELS,
        }
    }

    /// Key used in checkpoints and file names.
    pub fn key(self) -> &'static str {
        match self {
            Modality::Hr => "HR",
            Modality::Ms => "Ms",
            Modality::Sar => "SAR",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Hr => 0,
            Modality::Ms => 1,
            Modality::Sar => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s.to_ascii_lowercase().as_str() {
            "hr" => Some(Modality::Hr),
            "ms" => Some(Modality::Ms),
            "sar" => Some(Modality::Sar),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Latitude in [-90, 90], longitude in [-180, 180).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoLocation {
    pub latitude: f64,
    pub longitude: f64,
}

impl GeoLocation {
    pub fn new(latitude: f64, longitude: f64) -> crate::Result<Self> {
        let loc = GeoLocation {
            latitude,
            longitude,
        };
        if loc.is_valid() {
            Ok(loc)
        } else {
            Err(crate::Error::contract(format!(
                "location ({latitude}, {longitude}) outside [-90,90] x [-180,180)"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.latitude) && (-180.0..180.0).contains(&self.longitude)
    }
}

/// Map a 1-based calendar ordinal (1..=366) to a 0-based table index.
/// Day 366 of a leap year shares the last row.
pub fn day_index_from_ordinal(ordinal: u16) -> u16 {
    ordinal.clamp(1, DAYS_IN_YEAR as u16) - 1
}

/// Acquisition day-of-year per temporal slice, HR first, then Ms, then SAR.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DateVector(pub Vec<u16>);

impl DateVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn all_valid(&self) -> bool {
        self.0.iter().all(|&d| (d as usize) < DAYS_IN_YEAR)
    }
}

/// Per-frame cloud occlusion of the multispectral series.
///
/// `blocks[t]` lists the occluded block indices (row-major over the
/// `block_size`-pixel block grid) of frame `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudMask {
    pub block_size: usize,
    pub blocks: Vec<Vec<u32>>,
}

impl CloudMask {
    pub fn occluded_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }
}

/// Configured sample geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleShape {
    /// HR side length in pixels.
    pub hr_size: usize,
    /// Ms and SAR side length in pixels.
    pub ms_size: usize,
    pub t_ms: usize,
    pub t_sar: usize,
}

impl Default for SampleShape {
    fn default() -> Self {
        SampleShape {
            hr_size: 64,
            ms_size: 16,
            t_ms: 8,
            t_sar: 4,
        }
    }
}

impl SampleShape {
    /// Sequence lengths used for the original large-scale corpus.
    pub fn paper_scale() -> Self {
        SampleShape {
            hr_size: 64,
            ms_size: 16,
            t_ms: 20,
            t_sar: 10,
        }
    }

    pub fn resolution_ratio(&self) -> usize {
        self.hr_size / self.ms_size.max(1)
    }

    pub fn n_dates(&self) -> usize {
        1 + self.t_ms + self.t_sar
    }
}

/// One geo-aligned training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub id: String,
    /// [3, H_HR, W_HR]
    pub hr_image: Array3<f32>,
    /// [T_Ms, 10, H_Ms, W_Ms]
    pub ms_series: Array4<f32>,
    /// [T_SAR, 2, H_SAR, W_SAR]
    pub sar_series: Array4<f32>,
    pub location: GeoLocation,
    pub dates: DateVector,
    /// [H_HR, W_HR] class ids; synthetic data only.
    pub labels: Option<Array2<i32>>,
    pub clouds: Option<CloudMask>,
}

impl MultiModalSample {
    pub fn hr_date(&self) -> u16 {
        self.dates.0[0]
    }

    pub fn ms_dates(&self) -> &[u16] {
        let t = self.ms_series.shape()[0];
        &self.dates.0[1..1 + t]
    }

    pub fn sar_dates(&self) -> &[u16] {
        let t = self.ms_series.shape()[0];
        &self.dates.0[1 + t..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ChannelCount {
        modality: Modality,
        expected: usize,
        actual: usize,
    },
    SequenceLength {
        modality: Modality,
        expected: usize,
        actual: usize,
    },
    SpatialShape {
        modality: Modality,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    DateCountMismatch {
        expected: usize,
        actual: usize,
    },
    DayOutOfRange {
        position: usize,
        day: u16,
    },
    LocationOutOfRange,
    ValueOutOfRange {
        modality: Modality,
    },
    LabelShape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    NegativeLabel,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ChannelCount {
                modality,
                expected,
                actual,
            } => write!(f, "channel count: {modality} expects {expected}, got {actual}"),
            Violation::SequenceLength {
                modality,
                expected,
                actual,
            } => write!(f, "sequence length: {modality} expects {expected}, got {actual}"),
            Violation::SpatialShape {
                modality,
                expected,
                actual,
            } => write!(
                f,
                "spatial shape: {modality} expects {expected:?}, got {actual:?}"
            ),
            Violation::DateCountMismatch { expected, actual } => {
                write!(f, "date-count mismatch: expected {expected}, got {actual}")
            }
            Violation::DayOutOfRange { position, day } => {
                write!(f, "day out of range: dates[{position}] = {day}")
            }
            Violation::LocationOutOfRange => f.write_str("location out of range"),
            Violation::ValueOutOfRange { modality } => {
                write!(f, "value out of range: {modality} has values outside [0, 1]")
            }
            Violation::LabelShape { expected, actual } => {
                write!(f, "label shape: expected {expected:?}, got {actual:?}")
            }
            Violation::NegativeLabel => f.write_str("negative label id"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }
}

fn in_unit_range<'a>(mut values: impl Iterator<Item = &'a f32>) -> bool {
    values.all(|v| (0.0..=1.0).contains(v))
}

/// Check a sample against the configured geometry without touching it.
pub fn validate_sample(sample: &MultiModalSample, shape: &SampleShape) -> ValidationReport {
    let mut violations = Vec::new();

    let hr = sample.hr_image.shape();
    if hr[0] != HR_CHANNELS {
        violations.push(Violation::ChannelCount {
            modality: Modality::Hr,
            expected: HR_CHANNELS,
            actual: hr[0],
        });
    }
    if (hr[1], hr[2]) != (shape.hr_size, shape.hr_size) {
        violations.push(Violation::SpatialShape {
            modality: Modality::Hr,
            expected: (shape.hr_size, shape.hr_size),
            actual: (hr[1], hr[2]),
        });
    }

    for (modality, series, t_expected) in [
        (Modality::Ms, &sample.ms_series, shape.t_ms),
        (Modality::Sar, &sample.sar_series, shape.t_sar),
    ] {
        let s = series.shape();
        if s[0] != t_expected {
            violations.push(Violation::SequenceLength {
                modality,
                expected: t_expected,
                actual: s[0],
            });
        }
        if s[1] != modality.channels() {
            violations.push(Violation::ChannelCount {
                modality,
                expected: modality.channels(),
                actual: s[1],
            });
        }
        if (s[2], s[3]) != (shape.ms_size, shape.ms_size) {
            violations.push(Violation::SpatialShape {
                modality,
                expected: (shape.ms_size, shape.ms_size),
                actual: (s[2], s[3]),
            });
        }
    }

    let t_ms = sample.ms_series.shape()[0];
    let t_sar = sample.sar_series.shape()[0];
    let expected_dates = 1 + t_ms + t_sar;
    if sample.dates.len() != expected_dates {
        violations.push(Violation::DateCountMismatch {
            expected: expected_dates,
            actual: sample.dates.len(),
        });
    }
    for (position, &day) in sample.dates.0.iter().enumerate() {
        if day as usize >= DAYS_IN_YEAR {
            violations.push(Violation::DayOutOfRange { position, day });
        }
    }

    if !sample.location.is_valid() {
        violations.push(Violation::LocationOutOfRange);
    }

    if !in_unit_range(sample.hr_image.iter()) {
        violations.push(Violation::ValueOutOfRange {
            modality: Modality::Hr,
        });
    }
    if !in_unit_range(sample.ms_series.iter()) {
        violations.push(Violation::ValueOutOfRange {
            modality: Modality::Ms,
        });
    }
    if !in_unit_range(sample.sar_series.iter()) {
        violations.push(Violation::ValueOutOfRange {
            modality: Modality::Sar,
        });
    }

    if let Some(labels) = &sample.labels {
        let actual = (labels.shape()[0], labels.shape()[1]);
        if actual != (hr[1], hr[2]) {
            violations.push(Violation::LabelShape {
                expected: (hr[1], hr[2]),
                actual,
            });
        }
        if labels.iter().any(|&l| l < 0) {
            violations.push(Violation::NegativeLabel);
        }
    }

    ValidationReport { violations }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn blank_sample(shape: &SampleShape) -> MultiModalSample {
        let n = shape.hr_size;
        let m = shape.ms_size;
        MultiModalSample {
            id: "s0".into(),
            hr_image: Array3::from_elem((3, n, n), 0.5),
            ms_series: Array4::from_elem((shape.t_ms, 10, m, m), 0.25),
            sar_series: Array4::from_elem((shape.t_sar, 2, m, m), 0.75),
            location: GeoLocation::new(10.0, 20.0).unwrap(),
            dates: DateVector((0..shape.n_dates() as u16).map(|d| d * 7).collect()),
            labels: Some(Array2::zeros((n, n))),
            clouds: None,
        }
    }

    #[test]
    fn paper_scale_sample_passes() {
        let shape = SampleShape::paper_scale();
        assert_eq!((shape.t_ms, shape.t_sar), (20, 10));
        let report = validate_sample(&blank_sample(&shape), &shape);
        assert!(report.is_pass(), "{:?}", report.violations);
    }

    #[test]
    fn date_count_mismatch_is_reported() {
        let shape = SampleShape::default();
        let mut s = blank_sample(&shape);
        s.dates.0.pop();
        let report = validate_sample(&s, &shape);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].to_string().starts_with("date-count mismatch"));
    }

    #[test]
    fn day_365_is_out_of_range() {
        let shape = SampleShape::default();
        let mut s = blank_sample(&shape);
        s.dates.0[3] = 365;
        let report = validate_sample(&s, &shape);
        assert_eq!(
            report.violations,
            vec![Violation::DayOutOfRange {
                position: 3,
                day: 365
            }]
        );
        assert!(report.violations[0].to_string().starts_with("day out of range"));
    }

    #[test]
    fn leap_day_shares_last_row() {
        assert_eq!(day_index_from_ordinal(1), 0);
        assert_eq!(day_index_from_ordinal(365), 364);
        assert_eq!(day_index_from_ordinal(366), 364);
    }

    #[test]
    fn location_bounds() {
        assert!(GeoLocation::new(90.0, -180.0).is_ok());
        assert!(GeoLocation::new(-90.0, 179.999).is_ok());
        assert!(GeoLocation::new(0.0, 180.0).is_err());
        assert!(GeoLocation::new(90.5, 0.0).is_err());
    }

    #[derive(Debug, Clone)]
    enum Mutation {
        DropDate,
        ExtraDate,
        BadDay(u16),
        Latitude(f64),
        Longitude(f64),
        HrValue(f32),
        MsFrames(usize),
        SarChannels(usize),
        HrSize(usize),
        NegativeLabel,
    }

    fn mutation() -> impl Strategy<Value = Mutation> {
        prop_oneof![
            Just(Mutation::DropDate),
            Just(Mutation::ExtraDate),
            (365u16..1000).prop_map(Mutation::BadDay),
            (90.0001f64..200.0).prop_map(Mutation::Latitude),
            (180.0f64..400.0).prop_map(Mutation::Longitude),
            prop_oneof![(1.0001f32..5.0), (-5.0f32..-0.0001)].prop_map(Mutation::HrValue),
            (1usize..12).prop_map(Mutation::MsFrames),
            (1usize..5).prop_map(Mutation::SarChannels),
            (1usize..4).prop_map(|k| Mutation::HrSize(k * 16)),
            Just(Mutation::NegativeLabel),
        ]
    }

    fn apply(s: &mut MultiModalSample, m: &Mutation, shape: &SampleShape) -> bool {
        // Returns whether the mutation actually breaks an invariant.
        match *m {
            // Date-count changes can cancel out, so they are judged on the final state.
            Mutation::DropDate => {
                s.dates.0.pop();
                false
            }
            Mutation::ExtraDate => {
                s.dates.0.push(1);
                false
            }
            Mutation::BadDay(d) => {
                s.dates.0[0] = d;
                true
            }
            Mutation::Latitude(l) => {
                s.location.latitude = l;
                true
            }
            Mutation::Longitude(l) => {
                s.location.longitude = l;
                true
            }
            Mutation::HrValue(v) => {
                s.hr_image[[1, 2, 3]] = v;
                true
            }
            Mutation::MsFrames(t) => {
                s.ms_series = Array4::from_elem((t, 10, shape.ms_size, shape.ms_size), 0.1);
                t != shape.t_ms
            }
            Mutation::SarChannels(c) => {
                s.sar_series = Array4::from_elem((shape.t_sar, c, shape.ms_size, shape.ms_size), 0.1);
                c != SAR_CHANNELS
            }
            Mutation::HrSize(n) if n == shape.hr_size => false,
            Mutation::HrSize(n) => {
                s.hr_image = Array3::from_elem((3, n, n), 0.3);
                s.labels = Some(Array2::zeros((n, n)));
                n != shape.hr_size
            }
            Mutation::NegativeLabel => {
                if let Some(l) = s.labels.as_mut() {
                    l[[0, 0]] = -1;
                }
                true
            }
        }
    }

    proptest! {
        #[test]
        fn validation_accepts_exactly_valid_samples(muts in proptest::collection::vec(mutation(), 0..3)) {
            let shape = SampleShape::default();
            let mut s = blank_sample(&shape);
            let before = s.clone();
            let mut broken = false;
            for m in &muts {
                broken |= apply(&mut s, m, &shape);
            }
            broken |= s.dates.0.len() != shape.n_dates();
            let snapshot = s.clone();
            let report = validate_sample(&s, &shape);
            prop_assert_eq!(&s, &snapshot);
            prop_assert_eq!(report.is_pass(), !broken);
            if muts.is_empty() {
                prop_assert_eq!(&s, &before);
            }
        }
    }
}
