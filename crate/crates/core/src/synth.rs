//! Deterministic generator of geo-aligned multi-modal samples with
//! ground-truth landcover.
//!
//! Landcover is a smoothed random field per class, biased by a per-region
//! class prior and thresholded by argmax, so classes form contiguous patches.
//! Each class has an HR colour/texture family, a seasonal multispectral
//! signature and a SAR backscatter level. Clouds only touch the
//! multispectral series.

use std::f32::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_manifest, write_sample, CloudMask, DatasetManifest, DateVector,
    ManifestEntry, MultiModalSample, SampleShape, Split, DAYS_IN_YEAR, FORMAT_VERSION,
    MS_CHANNELS,
};
use crate::exec::{map_range, try_map_range, ExecMode};
use crate::geo::RegionIndex;
use crate::{Error, Result};

/// Brightness written into occluded multispectral blocks.
pub const CLOUD_SENTINEL: f32 = 1.0;

/// User-facing generator settings. Class signatures and region priors are
/// derived from `seed` by [`WorldSpec::from_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub region_grid: [usize; 2],
    pub shape: SampleShape,
    pub cloud_rate: f64,
    /// Side of a square cloud block, in multispectral pixels.
    pub cloud_block: usize,
    /// Coarse lattice size of the landcover field; smaller means larger patches.
    pub field_grid: usize,
    pub hr_noise: f32,
    /// Per-sample multiplicative illumination range, `1 ± jitter`.
    pub illumination_jitter: f32,
    /// Per-sample, per-channel additive HR colour offset range, `± shift`.
    pub colour_shift: f32,
    pub ms_noise: f32,
    /// Equivalent number of looks of the SAR speckle.
    pub sar_looks: f32,
    pub min_ms_distance: f32,
    pub min_sar_distance: f32,
    /// Scales the log region prior added to the landcover field.
    pub prior_strength: f32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            num_classes: 6,
            region_grid: [4, 4],
            shape: SampleShape::default(),
            cloud_rate: 0.1,
            cloud_block: 4,
            field_grid: 5,
            hr_noise: 0.05,
            illumination_jitter: 0.15,
            colour_shift: 0.0,
            ms_noise: 0.02,
            sar_looks: 4.0,
            min_ms_distance: 0.15,
            min_sar_distance: 0.1,
            prior_strength: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub hr_color: [f32; 3],
    /// Stripe frequency in cycles per HR pixel.
    pub texture_freq: f32,
    /// Stripe orientation in radians.
    pub texture_angle: f32,
    pub texture_contrast: f32,
    pub ms_mean: Vec<f32>,
    pub ms_amplitude: Vec<f32>,
    /// Seasonal phase in days.
    pub ms_phase: f32,
    pub sar_mean: [f32; 2],
}

impl ClassSignature {
    /// `mean + amplitude * sin(2π (day - phase) / 365)`, periodic in `day`.
    pub fn temporal_signal(&self, band: usize, day: u32) -> f32 {
        let day = (day % DAYS_IN_YEAR as u32) as f32;
        self.ms_mean[band]
            + self.ms_amplitude[band] * (2.0 * PI * (day - self.ms_phase) / DAYS_IN_YEAR as f32).sin()
    }

    /// Smallest Euclidean distance between the two multispectral signatures
    /// over every day of the year.
    pub fn ms_distance(&self, other: &ClassSignature) -> f32 {
        (0..DAYS_IN_YEAR as u32)
            .map(|day| {
                (0..self.ms_mean.len())
                    .map(|b| (self.temporal_signal(b, day) - other.temporal_signal(b, day)).powi(2))
                    .sum::<f32>()
                    .sqrt()
            })
            .fold(f32::INFINITY, f32::min)
    }

    pub fn sar_distance(&self, other: &ClassSignature) -> f32 {
        ((self.sar_mean[0] - other.sar_mean[0]).powi(2) + (self.sar_mean[1] - other.sar_mean[1]).powi(2))
            .sqrt()
    }
}

/// Fully resolved world: everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub class_signatures: Vec<ClassSignature>,
    /// `[N_R][num_classes]` class probabilities per region.
    pub region_priors: Vec<Vec<f32>>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// RNG for stream `stream` of `seed`; streams are independent of call order.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(stream)))
}

const SIGNATURE_STREAM: u64 = 0x5157_0000;
const PRIOR_STREAM: u64 = 0x5157_0001;
const SAMPLE_STREAM: u64 = 0x5157_1000_0000;

impl WorldSpec {
    /// Derive signatures and priors from the config seed, rejecting draws
    /// until every class pair is distinguishable.
    pub fn from_config(config: WorldConfig) -> Result<Self> {
        check_config(&config)?;
        let k = config.num_classes;
        let mut rng = stream_rng(config.seed, SIGNATURE_STREAM);

        let mut families: Vec<(f32, f32)> = [0.06f32, 0.12, 0.2, 0.3]
            .iter()
            .flat_map(|&f| [0.0, 0.25, 0.5, 0.75].map(|a| (f, a * PI)))
            .collect();
        families.shuffle(&mut rng);

        let mut signatures: Vec<ClassSignature> = Vec::with_capacity(k);
        let mut attempts = 0;
        while signatures.len() < k {
            attempts += 1;
            if attempts > 20_000 {
                return Err(Error::Config(format!(
                    "could not draw {k} distinguishable class signatures; relax min distances"
                )));
            }
            let (texture_freq, texture_angle) = families[signatures.len() % families.len()];
            let candidate = ClassSignature {
                hr_color: [rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6)],
                texture_freq,
                texture_angle,
                texture_contrast: rng.gen_range(0.1..0.2),
                ms_mean: (0..MS_CHANNELS).map(|_| rng.gen_range(0.1..0.6)).collect(),
                ms_amplitude: (0..MS_CHANNELS).map(|_| rng.gen_range(0.0..0.15)).collect(),
                ms_phase: rng.gen_range(0.0..DAYS_IN_YEAR as f32),
                sar_mean: [rng.gen_range(0.08..0.6), rng.gen_range(0.08..0.6)],
            };
            if signatures
                .iter()
                .all(|s| distinguishable(s, &candidate, &config))
            {
                signatures.push(candidate);
            }
        }

        let n_regions = config.region_grid[0] * config.region_grid[1];
        let mut prng = stream_rng(config.seed, PRIOR_STREAM);
        let gamma = Gamma::new(1.0f32, 1.0).expect("valid gamma");
        let region_priors = (0..n_regions)
            .map(|_| {
                let draws: Vec<f32> = (0..k).map(|_| gamma.sample(&mut prng)).collect();
                let total: f32 = draws.iter().sum();
                draws
                    .iter()
                    .map(|g| 0.3 / k as f32 + 0.7 * g / total)
                    .collect()
            })
            .collect();

        Ok(WorldSpec {
            config,
            class_signatures: signatures,
            region_priors,
        })
    }

    /// Build from explicit signatures, enforcing the distinguishability invariant.
    pub fn new(
        config: WorldConfig,
        class_signatures: Vec<ClassSignature>,
        region_priors: Vec<Vec<f32>>,
    ) -> Result<Self> {
        check_config(&config)?;
        if class_signatures.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} signatures for {} classes",
                class_signatures.len(),
                config.num_classes
            )));
        }
        for (i, a) in class_signatures.iter().enumerate() {
            if a.ms_mean.len() != MS_CHANNELS || a.ms_amplitude.len() != MS_CHANNELS {
                return Err(Error::Config(format!("class {i}: multispectral signature needs {MS_CHANNELS} bands")));
            }
            for (j, b) in class_signatures.iter().enumerate().skip(i + 1) {
                if !distinguishable(a, b, &config) {
                    return Err(Error::Config(format!("classes {i} and {j} are not distinguishable")));
                }
            }
        }
        let n_regions = config.region_grid[0] * config.region_grid[1];
        if region_priors.len() != n_regions
            || region_priors.iter().any(|p| p.len() != config.num_classes || p.iter().any(|&w| w <= 0.0))
        {
            return Err(Error::Config("region priors must be positive, one row per region".into()));
        }
        Ok(WorldSpec {
            config,
            class_signatures,
            region_priors,
        })
    }

    pub fn regions(&self) -> RegionIndex {
        RegionIndex::new(self.config.region_grid[0], self.config.region_grid[1])
    }

    pub fn shape(&self) -> SampleShape {
        self.config.shape
    }

    pub fn temporal_signal(&self, class_id: usize, band: usize, day: u32) -> f32 {
        self.class_signatures[class_id].temporal_signal(band, day)
    }
}

fn distinguishable(a: &ClassSignature, b: &ClassSignature, config: &WorldConfig) -> bool {
    a.ms_distance(b) >= config.min_ms_distance && a.sar_distance(b) >= config.min_sar_distance
}

fn check_config(c: &WorldConfig) -> Result<()> {
    let s = &c.shape;
    if c.num_classes < 2 {
        return Err(Error::Config("num_classes must be at least 2".into()));
    }
    if c.region_grid[0] == 0 || c.region_grid[1] == 0 {
        return Err(Error::Config("region_grid must be positive".into()));
    }
    if s.ms_size == 0 || s.hr_size % s.ms_size != 0 {
        return Err(Error::Config(format!(
            "hr_size {} must be a multiple of ms_size {}",
            s.hr_size, s.ms_size
        )));
    }
    if c.cloud_block == 0 || s.ms_size % c.cloud_block != 0 {
        return Err(Error::Config("cloud_block must divide ms_size".into()));
    }
    if !(0.0..=1.0).contains(&c.cloud_rate) {
        return Err(Error::Config("cloud_rate must lie in [0, 1]".into()));
    }
    if c.field_grid < 2 {
        return Err(Error::Config("field_grid must be at least 2".into()));
    }
    if c.sar_looks <= 0.0 {
        return Err(Error::Config("sar_looks must be positive".into()));
    }
    Ok(())
}

/// Majority label of each `factor`×`factor` block; ties go to the smallest id.
pub fn downsample_labels(labels: &Array2<i32>, factor: usize) -> Array2<i32> {
    let (h, w) = labels.dim();
    let (oh, ow) = (h / factor, w / factor);
    let max_label = labels.iter().copied().max().unwrap_or(0).max(0) as usize;
    let mut counts = vec![0usize; max_label + 1];
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        counts.iter_mut().for_each(|c| *c = 0);
        for y in i * factor..(i + 1) * factor {
            for x in j * factor..(j + 1) * factor {
                counts[labels[[y, x]].max(0) as usize] += 1;
            }
        }
        let mut best = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        best as i32
    })
}

/// Bilinear upsampling of a coarse lattice to `size`×`size`, corner-aligned.
fn upsample_field(coarse: &Array2<f32>, size: usize) -> Array2<f32> {
    let g = coarse.nrows();
    let scale = (g - 1) as f32 / (size.max(2) - 1) as f32;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let fy = y as f32 * scale;
        let fx = x as f32 * scale;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
        let (dy, dx) = (fy - y0 as f32, fx - x0 as f32);
        coarse[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + coarse[[y0, x1]] * (1.0 - dy) * dx
            + coarse[[y1, x0]] * dy * (1.0 - dx)
            + coarse[[y1, x1]] * dy * dx
    })
}

fn spread_days(rng: &mut ChaCha8Rng, n: usize) -> Vec<u16> {
    let step = DAYS_IN_YEAR as f32 / n.max(1) as f32;
    let offset = rng.gen_range(0.0..step);
    let mut days: Vec<u16> = (0..n)
        .map(|k| {
            let d = offset + k as f32 * step + rng.gen_range(-5.0..5.0);
            d.rem_euclid(DAYS_IN_YEAR as f32).floor() as u16 % DAYS_IN_YEAR as u16
        })
        .collect();
    days.sort_unstable();
    days
}

/// Generate sample `index` of the world. Pure function of `(spec, index)`.
pub fn generate_sample(spec: &WorldSpec, index: usize) -> MultiModalSample {
    let cfg = &spec.config;
    let shape = cfg.shape;
    let k = cfg.num_classes;
    let mut rng = stream_rng(cfg.seed, SAMPLE_STREAM + index as u64);
    let std_normal = Normal::new(0.0f32, 1.0).expect("valid normal");

    let regions = spec.regions();
    let region = rng.gen_range(0..regions.len());
    let location = regions.random_location_in(region, &mut rng);
    let prior = &spec.region_priors[region];

    // Landcover: argmax over per-class smooth fields plus log prior.
    let n = shape.hr_size;
    let fields: Vec<Array2<f32>> = (0..k)
        .map(|c| {
            let coarse = Array2::from_shape_fn((cfg.field_grid, cfg.field_grid), |_| {
                std_normal.sample(&mut rng)
            });
            let bias = cfg.prior_strength * prior[c].ln();
            upsample_field(&coarse, n).mapv(|v| v + bias)
        })
        .collect();
    let labels = Array2::from_shape_fn((n, n), |(y, x)| {
        let mut best = 0;
        for c in 1..k {
            if fields[c][[y, x]] > fields[best][[y, x]] {
                best = c;
            }
        }
        best as i32
    });

    let hr_day = rng.gen_range(0..DAYS_IN_YEAR as u16);
    let ms_days = spread_days(&mut rng, shape.t_ms);
    let sar_days = spread_days(&mut rng, shape.t_sar);

    // HR: class colour under per-sample illumination plus oriented stripes.
    let illum = 1.0 + rng.gen_range(-cfg.illumination_jitter..=cfg.illumination_jitter);
    let phases: Vec<f32> = (0..k).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let shift: [f32; 3] = if cfg.colour_shift > 0.0 {
        std::array::from_fn(|_| rng.gen_range(-cfg.colour_shift..=cfg.colour_shift))
    } else {
        [0.0; 3]
    };
    let hr_noise = Normal::new(0.0f32, cfg.hr_noise.max(0.0)).expect("valid normal");
    let mut hr_image = Array3::zeros((3, n, n));
    for y in 0..n {
        for x in 0..n {
            let c = labels[[y, x]] as usize;
            let sig = &spec.class_signatures[c];
            let (s, co) = sig.texture_angle.sin_cos();
            let stripe = sig.texture_contrast
                * (2.0 * PI * sig.texture_freq * (x as f32 * co + y as f32 * s) + phases[c]).sin();
            for ch in 0..3 {
                let v = sig.hr_color[ch] * illum + shift[ch] + stripe + hr_noise.sample(&mut rng);
                hr_image[[ch, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }

    let m = shape.ms_size;
    let low_labels = downsample_labels(&labels, shape.resolution_ratio());

    let ms_noise = Normal::new(0.0f32, cfg.ms_noise.max(0.0)).expect("valid normal");
    let blocks_per_side = m / cfg.cloud_block;
    let mut ms_series = Array4::zeros((shape.t_ms, MS_CHANNELS, m, m));
    let mut cloud_blocks = Vec::with_capacity(shape.t_ms);
    for (t, &day) in ms_days.iter().enumerate() {
        for y in 0..m {
            for x in 0..m {
                let sig = &spec.class_signatures[low_labels[[y, x]] as usize];
                for b in 0..MS_CHANNELS {
                    let v = sig.temporal_signal(b, day as u32) + ms_noise.sample(&mut rng);
                    ms_series[[t, b, y, x]] = v.clamp(0.0, 1.0);
                }
            }
        }
        let mut occluded = Vec::new();
        for block in 0..blocks_per_side * blocks_per_side {
            if rng.gen_bool(cfg.cloud_rate) {
                occluded.push(block as u32);
                let (by, bx) = (block / blocks_per_side, block % blocks_per_side);
                for y in by * cfg.cloud_block..(by + 1) * cfg.cloud_block {
                    for x in bx * cfg.cloud_block..(bx + 1) * cfg.cloud_block {
                        for b in 0..MS_CHANNELS {
                            ms_series[[t, b, y, x]] = CLOUD_SENTINEL;
                        }
                    }
                }
            }
        }
        cloud_blocks.push(occluded);
    }

    // SAR: class backscatter under gamma speckle; unaffected by clouds.
    let speckle = Gamma::new(cfg.sar_looks, 1.0 / cfg.sar_looks).expect("valid gamma");
    let mut sar_series = Array4::zeros((shape.t_sar, 2, m, m));
    for t in 0..shape.t_sar {
        for y in 0..m {
            for x in 0..m {
                let sig = &spec.class_signatures[low_labels[[y, x]] as usize];
                for p in 0..2 {
                    let v = sig.sar_mean[p] * speckle.sample(&mut rng);
                    sar_series[[t, p, y, x]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    let mut dates = Vec::with_capacity(shape.n_dates());
    dates.push(hr_day);
    dates.extend_from_slice(&ms_days);
    dates.extend_from_slice(&sar_days);

    MultiModalSample {
        id: sample_id(index),
        hr_image,
        ms_series,
        sar_series,
        location,
        dates: DateVector(dates),
        labels: Some(labels),
        clouds: Some(CloudMask {
            block_size: cfg.cloud_block,
            blocks: cloud_blocks,
        }),
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Every fifth sample is held out.
pub fn split_of(index: usize) -> Split {
    if index % 5 == 4 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Generate `n` samples in memory.
pub fn generate_samples(spec: &WorldSpec, n: usize, mode: ExecMode) -> Vec<MultiModalSample> {
    map_range(mode, n, |i| generate_sample(spec, i))
}

/// Manifest describing `n` generated samples of `spec`.
pub fn manifest_for(spec: &WorldSpec, n: usize) -> Result<DatasetManifest> {
    Ok(DatasetManifest {
        format_version: FORMAT_VERSION,
        samples: (0..n)
            .map(|i| ManifestEntry {
                id: sample_id(i),
                split: split_of(i),
            })
            .collect(),
        world: Some(serde_json::to_value(spec)?),
    })
}

/// Write `n` samples plus `manifest.json` into `out` (created if missing).
pub fn generate_dataset(
    spec: &WorldSpec,
    n_samples: usize,
    out: &Path,
    mode: ExecMode,
) -> Result<DatasetManifest> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    std::fs::create_dir_all(out)?;
    try_map_range(mode, n_samples, |i| {
        let sample = generate_sample(spec, i);
        write_sample(&out.join(&sample.id), &sample)
    })?;
    let manifest = manifest_for(spec, n_samples)?;
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_sample;

    fn small_config() -> WorldConfig {
        WorldConfig {
            shape: SampleShape {
                hr_size: 32,
                ms_size: 8,
                t_ms: 4,
                t_sar: 2,
            },
            ..WorldConfig::default()
        }
    }

    fn oracle_signal(sig: &ClassSignature, band: usize, day: u32) -> f64 {
        let d = (day % 365) as f64;
        sig.ms_mean[band] as f64
            + sig.ms_amplitude[band] as f64 * (2.0 * std::f64::consts::PI * (d - sig.ms_phase as f64) / 365.0).sin()
    }

    #[test]
    fn temporal_signal_matches_scalar_oracle() {
        let spec = WorldSpec::from_config(WorldConfig::default()).unwrap();
        for (c, sig) in spec.class_signatures.iter().enumerate() {
            for band in [0, 4, 9] {
                for day in [0u32, 17, 91, 182, 300, 364] {
                    let got = spec.temporal_signal(c, band, day) as f64;
                    assert!((got - oracle_signal(sig, band, day)).abs() < 1e-5);
                    assert_eq!(spec.temporal_signal(c, band, day), spec.temporal_signal(c, band, day + 365));
                }
            }
        }
    }

    #[test]
    fn zero_amplitude_is_constant() {
        let mut sig = WorldSpec::from_config(WorldConfig::default()).unwrap().class_signatures[0].clone();
        sig.ms_amplitude = vec![0.0; MS_CHANNELS];
        for day in 0..365 {
            assert_eq!(sig.temporal_signal(3, day), sig.ms_mean[3]);
        }
    }

    #[test]
    fn indistinguishable_classes_rejected() {
        let spec = WorldSpec::from_config(WorldConfig::default()).unwrap();
        let mut sigs = spec.class_signatures.clone();
        sigs[1] = sigs[0].clone();
        let err = WorldSpec::new(spec.config.clone(), sigs, spec.region_priors.clone()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(WorldSpec::new(spec.config.clone(), spec.class_signatures.clone(), spec.region_priors.clone()).is_ok());
    }

    #[test]
    fn samples_are_valid_and_deterministic() {
        let spec = WorldSpec::from_config(small_config()).unwrap();
        let a = generate_samples(&spec, 6, ExecMode::Parallel);
        let b = generate_samples(&spec, 6, ExecMode::Sequential);
        assert_eq!(a, b);
        for s in &a {
            let report = validate_sample(s, &spec.shape());
            assert!(report.is_pass(), "{:?}", report.violations);
            let region = spec.regions().region_of(&s.location);
            assert!(region < spec.regions().len());
        }
    }

    #[test]
    fn dataset_bytes_are_reproducible() {
        let spec = WorldSpec::from_config(small_config()).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&spec, 4, d1.path(), ExecMode::Parallel).unwrap();
        generate_dataset(&spec, 4, d2.path(), ExecMode::Sequential).unwrap();
        for entry in walk(d1.path()) {
            let rel = entry.strip_prefix(d1.path()).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(d2.path().join(rel)).unwrap(), "{rel:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn zero_cloud_rate_has_no_occlusion() {
        let spec = WorldSpec::from_config(WorldConfig {
            cloud_rate: 0.0,
            ..small_config()
        })
        .unwrap();
        for s in generate_samples(&spec, 5, ExecMode::default()) {
            assert_eq!(s.clouds.unwrap().occluded_count(), 0);
        }
        let cloudy = WorldSpec::from_config(WorldConfig {
            cloud_rate: 1.0,
            ..small_config()
        })
        .unwrap();
        let s = generate_sample(&cloudy, 0);
        assert!(s.ms_series.iter().all(|&v| v == CLOUD_SENTINEL));
        assert!(s.sar_series.iter().any(|&v| v != CLOUD_SENTINEL));
    }

    #[test]
    fn every_class_is_present_at_scale() {
        let spec = WorldSpec::from_config(WorldConfig::default()).unwrap();
        let samples = generate_samples(&spec, 512, ExecMode::default());
        let mut hist = vec![0usize; 6];
        let mut total = 0;
        for s in &samples {
            for &l in s.labels.as_ref().unwrap() {
                hist[l as usize] += 1;
                total += 1;
            }
        }
        for (c, &n) in hist.iter().enumerate() {
            assert!(n as f64 / total as f64 >= 0.02, "class {c}: {hist:?}");
        }
    }

    #[test]
    fn downsampled_labels_agree_with_ms_resolution() {
        let labels = Array2::from_shape_vec((4, 4), vec![0, 0, 1, 1, 0, 1, 1, 2, 2, 2, 3, 3, 2, 3, 3, 3]).unwrap();
        let low = downsample_labels(&labels, 2);
        // top-left block: three 0s; top-right: three 1s; bottom-left: three 2s; bottom-right: four 3s.
        assert_eq!(low, Array2::from_shape_vec((2, 2), vec![0, 1, 2, 3]).unwrap());
        let tie = Array2::from_shape_vec((2, 2), vec![2, 1, 1, 2]).unwrap();
        assert_eq!(downsample_labels(&tie, 2)[[0, 0]], 1);
    }

    #[test]
    fn nearest_class_mean_separates_clean_ms_pixels() {
        let spec = WorldSpec::from_config(WorldConfig {
            cloud_rate: 0.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let shape = spec.shape();
        let (mut correct, mut total) = (0usize, 0usize);
        for s in generate_samples(&spec, 24, ExecMode::default()) {
            let low = downsample_labels(s.labels.as_ref().unwrap(), shape.resolution_ratio());
            for (t, &day) in s.ms_dates().iter().enumerate() {
                for y in 0..shape.ms_size {
                    for x in 0..shape.ms_size {
                        let best = (0..spec.config.num_classes)
                            .min_by(|&a, &b| {
                                let da: f32 = (0..MS_CHANNELS)
                                    .map(|k| (s.ms_series[[t, k, y, x]] - spec.temporal_signal(a, k, day as u32)).powi(2))
                                    .sum();
                                let db: f32 = (0..MS_CHANNELS)
                                    .map(|k| (s.ms_series[[t, k, y, x]] - spec.temporal_signal(b, k, day as u32)).powi(2))
                                    .sum();
                                da.partial_cmp(&db).unwrap()
                            })
                            .unwrap();
                        correct += (best as i32 == low[[y, x]]) as usize;
                        total += 1;
                    }
                }
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.9, "nearest-class-mean accuracy {acc}");
    }
}
