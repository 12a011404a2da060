//! Paired view generation. Both global views share a crop side so their
//! feature cells have the same footprint; offsets and flips differ. All
//! modalities of a view see the same geometric transform.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::AugmentConfig;
use crate::data::{MultiModalSample, DAYS_IN_YEAR};

/// Square crop in footprint coordinates (`[0, 1]` on both axes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub size: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl CropBox {
    pub const FULL: CropBox = CropBox {
        x0: 0.0,
        y0: 0.0,
        size: 1.0,
        hflip: false,
        vflip: false,
    };

    /// Footprint coordinate `(x, y)` of the centre of cell `(row, col)` on a
    /// `grid × grid` lattice over the crop.
    pub fn cell_center(&self, row: usize, col: usize, grid: usize) -> (f64, f64) {
        let r = if self.vflip { grid - 1 - row } else { row };
        let c = if self.hflip { grid - 1 - col } else { col };
        (
            self.x0 + self.size * (c as f64 + 0.5) / grid as f64,
            self.y0 + self.size * (r as f64 + 0.5) / grid as f64,
        )
    }

    /// Fractional `(row, col)` of footprint point `(x, y)` in this crop's lattice.
    pub fn locate(&self, x: f64, y: f64, grid: usize) -> (f64, f64) {
        let c = (x - self.x0) / self.size * grid as f64 - 0.5;
        let r = (y - self.y0) / self.size * grid as f64 - 0.5;
        let g = (grid - 1) as f64;
        (if self.vflip { g - r } else { r }, if self.hflip { g - c } else { c })
    }
}

/// Site pairing between two views at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewCorrespondence {
    pub grid: usize,
    pub u: CropBox,
    pub v: CropBox,
    /// `(site in u, site in v)`, ascending in the u site.
    pub pairs: Vec<(usize, usize)>,
    pub overlap_u: Array2<bool>,
    pub overlap_v: Array2<bool>,
}

impl ViewCorrespondence {
    /// Match every u cell to the v cell whose centre lies within half a cell
    /// of the same footprint point.
    pub fn new(u: CropBox, v: CropBox, grid: usize) -> Self {
        let mut pairs = Vec::new();
        let mut overlap_u = Array2::from_elem((grid, grid), false);
        let mut overlap_v = Array2::from_elem((grid, grid), false);
        let tol = 0.5 + 1e-9;
        for r in 0..grid {
            for c in 0..grid {
                let (x, y) = u.cell_center(r, c, grid);
                let (fr, fc) = v.locate(x, y, grid);
                let (rr, rc) = (fr.round(), fc.round());
                let inside = rr >= 0.0 && rc >= 0.0 && rr < grid as f64 && rc < grid as f64;
                if inside && (fr - rr).abs() <= tol && (fc - rc).abs() <= tol {
                    let (vr, vc) = (rr as usize, rc as usize);
                    pairs.push((r * grid + c, vr * grid + vc));
                    overlap_u[[r, c]] = true;
                    overlap_v[[vr, vc]] = true;
                }
            }
        }
        ViewCorrespondence {
            grid,
            u,
            v,
            pairs,
            overlap_u,
            overlap_v,
        }
    }

    pub fn identity(grid: usize) -> Self {
        Self::new(CropBox::FULL, CropBox::FULL, grid)
    }

    /// Same pairing seen from v.
    pub fn reversed(&self) -> Self {
        let mut pairs: Vec<(usize, usize)> = self.pairs.iter().map(|&(a, b)| (b, a)).collect();
        pairs.sort_unstable();
        ViewCorrespondence {
            grid: self.grid,
            u: self.v,
            v: self.u,
            pairs,
            overlap_u: self.overlap_v.clone(),
            overlap_v: self.overlap_u.clone(),
        }
    }
}

/// One augmented view of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub hr: Array3<f32>,
    pub ms: Array4<f32>,
    pub sar: Array4<f32>,
    /// HR day, then kept Ms days, then kept SAR days, after jitter.
    pub dates: Vec<u16>,
    pub crop: CropBox,
    pub ms_frames: Vec<usize>,
    pub sar_frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub u: View,
    pub v: View,
    /// HR-only local crops.
    pub locals: Vec<(Array3<f32>, CropBox)>,
    pub correspondence: ViewCorrespondence,
}

/// Bilinear resample of `img [C, H, W]` over `crop` onto `out × out`.
pub fn resample_crop(img: ArrayView3<f32>, crop: &CropBox, out: usize) -> Array3<f32> {
    let (ch, h, w) = img.dim();
    let mut res = Array3::zeros((ch, out, out));
    for i in 0..out {
        for j in 0..out {
            let (x, y) = crop.cell_center(i, j, out);
            let sy = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for c in 0..ch {
                let top = img[[c, y0, x0]] * (1.0 - fx) + img[[c, y0, x1]] * fx;
                let bot = img[[c, y1, x0]] * (1.0 - fx) + img[[c, y1, x1]] * fx;
                res[[c, i, j]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    res
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Array3<f32>, sigma: f32) -> Array3<f32> {
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|k| (-(k * k) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.into_iter().map(|k| k / norm).collect();
    let (ch, h, w) = img.dim();
    let pass = |src: &Array3<f32>, horizontal: bool| {
        Array3::from_shape_fn((ch, h, w), |(c, y, x)| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let off = i as isize - radius;
                    let (yy, xx) = if horizontal {
                        (y, (x as isize + off).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((y as isize + off).clamp(0, h as isize - 1) as usize, x)
                    };
                    k * src[[c, yy, xx]]
                })
                .sum()
        })
    };
    pass(&pass(img, true), false)
}

pub fn solarize(img: &mut Array3<f32>, threshold: f32) {
    img.mapv_inplace(|v| if v >= threshold { 1.0 - v } else { v });
}

fn pick_frames<R: Rng>(t: usize, keep: usize, rng: &mut R) -> Vec<usize> {
    if keep == 0 || keep >= t {
        return (0..t).collect();
    }
    let mut idx = sample_indices(rng, t, keep).into_vec();
    idx.sort_unstable();
    idx
}

fn jitter<R: Rng>(day: u16, max: u16, rng: &mut R) -> u16 {
    if max == 0 {
        return day;
    }
    let d = day as i32 + rng.gen_range(-(max as i32)..=max as i32);
    d.clamp(0, DAYS_IN_YEAR as i32 - 1) as u16
}

fn random_box<R: Rng>(size: f64, flip_prob: f64, rng: &mut R) -> CropBox {
    let slack = (1.0 - size).max(0.0);
    CropBox {
        x0: rng.gen_range(0.0..=slack),
        y0: rng.gen_range(0.0..=slack),
        size,
        hflip: rng.gen_bool(flip_prob),
        vflip: rng.gen_bool(flip_prob),
    }
}

fn photometric<R: Rng>(mut hr: Array3<f32>, cfg: &AugmentConfig, rng: &mut R) -> Array3<f32> {
    if cfg.colour_jitter > 0.0 {
        let j = cfg.colour_jitter;
        for mut ch in hr.outer_iter_mut() {
            let offset = rng.gen_range(-j..=j);
            ch.mapv_inplace(|v| (v + offset).clamp(0.0, 1.0));
        }
    }
    if rng.gen_bool(cfg.blur_prob) {
        hr = gaussian_blur(&hr, rng.gen_range(0.1..1.5));
    }
    if rng.gen_bool(cfg.solarize_prob) {
        solarize(&mut hr, 0.5);
    }
    hr
}

fn select_frames(series: &Array4<f32>, frames: &[usize]) -> Array4<f32> {
    series.select(Axis(0), frames)
}

fn resample_series(series: &Array4<f32>, crop: &CropBox, out: usize) -> Array4<f32> {
    let (t, c) = (series.shape()[0], series.shape()[1]);
    let mut res = Array4::zeros((t, c, out, out));
    for (k, frame) in series.outer_iter().enumerate() {
        res.index_axis_mut(Axis(0), k).assign(&resample_crop(frame, crop, out));
    }
    res
}

fn make_view<R: Rng>(sample: &MultiModalSample, crop: CropBox, cfg: &AugmentConfig, rng: &mut R) -> View {
    let hr_size = sample.hr_image.shape()[1];
    let ms_size = sample.ms_series.shape()[2];
    let hr = photometric(resample_crop(sample.hr_image.view(), &crop, hr_size), cfg, rng);
    let ms_frames = pick_frames(sample.ms_series.shape()[0], cfg.ms_view_len, rng);
    let sar_frames = pick_frames(sample.sar_series.shape()[0], cfg.sar_view_len, rng);
    let ms = resample_series(&select_frames(&sample.ms_series, &ms_frames), &crop, ms_size);
    let sar = resample_series(&select_frames(&sample.sar_series, &sar_frames), &crop, ms_size);
    let mut dates = vec![sample.hr_date()];
    dates.extend(ms_frames.iter().map(|&i| jitter(sample.ms_dates()[i], cfg.date_jitter, rng)));
    dates.extend(sar_frames.iter().map(|&i| jitter(sample.sar_dates()[i], cfg.date_jitter, rng)));
    View {
        hr,
        ms,
        sar,
        dates,
        crop,
        ms_frames,
        sar_frames,
    }
}

/// Two global views, local HR crops and their site correspondence.
/// `grid` is the feature lattice side of a global view.
pub fn augment<R: Rng>(sample: &MultiModalSample, cfg: &AugmentConfig, grid: usize, rng: &mut R) -> AugmentedSample {
    let [lo, hi] = cfg.global_scale;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let bu = random_box(scale, cfg.flip_prob, rng);
    let bv = random_box(scale, cfg.flip_prob, rng);
    let u = make_view(sample, bu, cfg, rng);
    let v = make_view(sample, bv, cfg, rng);
    let mut locals = Vec::with_capacity(cfg.n_local);
    for _ in 0..cfg.n_local {
        let [llo, lhi] = cfg.local_scale;
        let s = if lhi > llo { rng.gen_range(llo..=lhi) } else { llo };
        let b = random_box(s, cfg.flip_prob, rng);
        let img = photometric(resample_crop(sample.hr_image.view(), &b, cfg.local_size), cfg, rng);
        locals.push((img, b));
    }
    AugmentedSample {
        u,
        v,
        locals,
        correspondence: ViewCorrespondence::new(bu, bv, grid),
    }
}

/// The un-augmented view used for feature extraction.
pub fn full_view(sample: &MultiModalSample) -> View {
    let t_ms = sample.ms_series.shape()[0];
    let t_sar = sample.sar_series.shape()[0];
    View {
        hr: sample.hr_image.clone(),
        ms: sample.ms_series.clone(),
        sar: sample.sar_series.clone(),
        dates: sample.dates.0.clone(),
        crop: CropBox::FULL,
        ms_frames: (0..t_ms).collect(),
        sar_frames: (0..t_sar).collect(),
    }
}
