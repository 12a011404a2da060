//! On-disk sample and dataset layout.
//!
//! ```text
//! dataset/
//!   manifest.json
//!   <sample-id>/
//!     meta.json      location, dates, shapes, cloud mask, format version
//!     hr.f32         [3, H, W]           little-endian float32
//!     ms.f32         [T_Ms, 10, h, w]
//!     sar.f32        [T_SAR, 2, h, w]
//!     labels.i32     [H, W]              optional, little-endian int32
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{CloudMask, DateVector, GeoLocation, MultiModalSample};
use crate::exec::{try_map_range, ExecMode};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Shapes {
    hr: Vec<usize>,
    ms: Vec<usize>,
    sar: Vec<usize>,
    labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Files {
    hr: String,
    ms: String,
    sar: String,
    labels: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleMeta {
    format_version: u32,
    id: String,
    location: GeoLocation,
    dates: DateVector,
    shapes: Shapes,
    files: Files,
    #[serde(default)]
    clouds: Option<CloudMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub samples: Vec<ManifestEntry>,
    /// Generator provenance; free-form so that non-synthetic datasets can omit it.
    #[serde(default)]
    pub world: Option<serde_json::Value>,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Dataset(format!(
            "{}: expected {} float32 values, found {} bytes",
            path.display(),
            expected,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn dims<const N: usize>(shape: &[usize], what: &str) -> Result<[usize; N]> {
    shape
        .try_into()
        .map_err(|_| Error::Dataset(format!("{what}: expected rank {N}, got {shape:?}")))
}

/// Write one sample into `dir` (created if missing).
pub fn write_sample(dir: &Path, sample: &MultiModalSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = SampleMeta {
        format_version: FORMAT_VERSION,
        id: sample.id.clone(),
        location: sample.location,
        dates: sample.dates.clone(),
        shapes: Shapes {
            hr: sample.hr_image.shape().to_vec(),
            ms: sample.ms_series.shape().to_vec(),
            sar: sample.sar_series.shape().to_vec(),
            labels: sample.labels.as_ref().map(|l| l.shape().to_vec()),
        },
        files: Files {
            hr: "hr.f32".into(),
            ms: "ms.f32".into(),
            sar: "sar.f32".into(),
            labels: sample.labels.as_ref().map(|_| "labels.i32".into()),
        },
        clouds: sample.clouds.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    write_f32(&dir.join("hr.f32"), sample.hr_image.iter().copied())?;
    write_f32(&dir.join("ms.f32"), sample.ms_series.iter().copied())?;
    write_f32(&dir.join("sar.f32"), sample.sar_series.iter().copied())?;
    if let Some(labels) = &sample.labels {
        let mut bytes = Vec::with_capacity(labels.len() * 4);
        for v in labels.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join("labels.i32"), bytes)?;
    }
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<MultiModalSample> {
    let meta: SampleMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "{}: unsupported format version {}",
            dir.display(),
            meta.format_version
        )));
    }
    let hr = dims::<3>(&meta.shapes.hr, "hr")?;
    let ms = dims::<4>(&meta.shapes.ms, "ms")?;
    let sar = dims::<4>(&meta.shapes.sar, "sar")?;
    let to_err = |e: ndarray::ShapeError| Error::Dataset(e.to_string());

    let hr_image = Array3::from_shape_vec(hr, read_f32(&dir.join(&meta.files.hr), hr.iter().product())?)
        .map_err(to_err)?;
    let ms_series = Array4::from_shape_vec(ms, read_f32(&dir.join(&meta.files.ms), ms.iter().product())?)
        .map_err(to_err)?;
    let sar_series =
        Array4::from_shape_vec(sar, read_f32(&dir.join(&meta.files.sar), sar.iter().product())?)
            .map_err(to_err)?;
    let labels = match (&meta.shapes.labels, &meta.files.labels) {
        (Some(shape), Some(file)) => {
            let shape = dims::<2>(shape, "labels")?;
            let bytes = fs::read(dir.join(file))?;
            if bytes.len() != shape[0] * shape[1] * 4 {
                return Err(Error::Dataset(format!("{}: truncated labels", dir.display())));
            }
            let values = bytes
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Some(Array2::from_shape_vec(shape, values).map_err(to_err)?)
        }
        _ => None,
    };
    Ok(MultiModalSample {
        id: meta.id,
        hr_image,
        ms_series,
        sar_series,
        location: meta.location,
        dates: meta.dates,
        labels,
        clouds: meta.clouds,
    })
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

/// A fully loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<MultiModalSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&MultiModalSample> {
        self.manifest
            .samples
            .iter()
            .zip(&self.samples)
            .filter(|(e, _)| e.split == split)
            .map(|(_, s)| s)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn load_dataset(root: &Path, mode: ExecMode) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let bytes = fs::read(&manifest_path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let samples = try_map_range(mode, manifest.samples.len(), |i| {
        read_sample(&root.join(&manifest.samples[i].id))
    })?;
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::blank_sample;
    use crate::data::SampleShape;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn sample_round_trip_is_bit_identical(
            seed in any::<u64>(),
            lat in -90.0f64..=90.0,
            lon in -180.0f64..180.0,
            with_labels in any::<bool>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let shape = SampleShape { hr_size: 8, ms_size: 4, t_ms: 3, t_sar: 2 };
            let mut s = blank_sample(&shape);
            s.hr_image.mapv_inplace(|_| rng.gen());
            s.ms_series.mapv_inplace(|_| rng.gen());
            s.sar_series.mapv_inplace(|_| rng.gen());
            s.location = GeoLocation { latitude: lat, longitude: lon };
            s.dates = DateVector((0..shape.n_dates()).map(|_| rng.gen_range(0..365)).collect());
            s.labels = if with_labels { Some(Array2::from_shape_fn((8, 8), |_| rng.gen_range(0..6))) } else { None };
            s.clouds = Some(CloudMask { block_size: 2, blocks: vec![vec![0, 3], vec![], vec![1]] });

            let dir = tempfile::tempdir().unwrap();
            write_sample(dir.path(), &s).unwrap();
            let back = read_sample(dir.path()).unwrap();
            prop_assert_eq!(back.location.latitude.to_bits(), lat.to_bits());
            prop_assert_eq!(back.location.longitude.to_bits(), lon.to_bits());
            let bits = |a: &[f32]| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back.hr_image.as_slice().unwrap()), bits(s.hr_image.as_slice().unwrap()));
            prop_assert_eq!(bits(back.ms_series.as_slice().unwrap()), bits(s.ms_series.as_slice().unwrap()));
            prop_assert_eq!(&back, &s);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let shape = SampleShape { hr_size: 8, ms_size: 4, t_ms: 2, t_sar: 1 };
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), &blank_sample(&shape)).unwrap();
        let path = dir.path().join("ms.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_sample(dir.path()), Err(Error::Dataset(_))));
    }
}
