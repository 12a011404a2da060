//! Geo-context: region partition, prototype bank, Sinkhorn-Knopp
//! assignment, EMA prototype updates and attentional integration.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::{s, Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{AxisKind, FeatureVolume, GeoLocation};
use crate::nn::{softmax_last, volume_slice};
use crate::{Error, Result};

/// Uniform lat/lon grid over the globe. Row 0 is the southernmost band,
/// column 0 starts at longitude −180.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionIndex {
    pub rows: usize,
    pub cols: usize,
}

impl RegionIndex {
    pub fn new(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "region grid must be non-empty");
        RegionIndex { rows, cols }
    }

    /// 4096 regions as a 64×64 grid.
    pub fn paper_scale() -> Self {
        RegionIndex::new(64, 64)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn region_of(&self, loc: &GeoLocation) -> usize {
        let row = (((loc.latitude + 90.0) / 180.0 * self.rows as f64).floor() as isize)
            .clamp(0, self.rows as isize - 1) as usize;
        let col = (((loc.longitude + 180.0) / 360.0 * self.cols as f64).floor() as isize)
            .clamp(0, self.cols as isize - 1) as usize;
        row * self.cols + col
    }

    pub fn cell_center(&self, region: usize) -> GeoLocation {
        let (row, col) = (region / self.cols, region % self.cols);
        GeoLocation {
            latitude: -90.0 + (row as f64 + 0.5) * 180.0 / self.rows as f64,
            longitude: -180.0 + (col as f64 + 0.5) * 360.0 / self.cols as f64,
        }
    }

    pub fn random_location_in<R: Rng>(&self, region: usize, rng: &mut R) -> GeoLocation {
        let (row, col) = (region / self.cols, region % self.cols);
        let lat = -90.0 + (row as f64 + rng.gen::<f64>()) * 180.0 / self.rows as f64;
        let lon = -180.0 + (col as f64 + rng.gen::<f64>()) * 360.0 / self.cols as f64;
        GeoLocation {
            latitude: lat.clamp(-90.0, 90.0),
            longitude: lon.min(180.0_f64.next_down()),
        }
    }
}

/// Region-indexed prototypes `[N_R, N_p, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    grid: RegionIndex,
    prototypes: Array3<f32>,
    momentum: f32,
    frozen: bool,
}

impl PrototypeBank {
    /// Unit-norm random prototypes.
    pub fn new_random<R: Rng>(
        grid: RegionIndex,
        n_prototypes: usize,
        width: usize,
        momentum: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let mut prototypes = Array3::<f32>::zeros((grid.len(), n_prototypes, width));
        for r in 0..grid.len() {
            for j in 0..n_prototypes {
                let v: Vec<f32> = (0..width).map(|_| StandardNormal.sample(rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                for (k, x) in v.into_iter().enumerate() {
                    prototypes[[r, j, k]] = x / norm;
                }
            }
        }
        Self::from_array(grid, prototypes, momentum)
    }

    pub fn from_array(grid: RegionIndex, prototypes: Array3<f32>, momentum: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("prototype momentum {momentum} outside [0, 1)")));
        }
        if prototypes.shape()[0] != grid.len() {
            return Err(Error::shape("regions", grid.len(), prototypes.shape()[0]));
        }
        Ok(PrototypeBank {
            grid,
            prototypes,
            momentum,
            frozen: false,
        })
    }

    pub fn grid(&self) -> RegionIndex {
        self.grid
    }

    pub fn n_prototypes(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.prototypes.shape()[2]
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Fix the bank for downstream use; updates are rejected from now on.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn prototypes(&self) -> &Array3<f32> {
        &self.prototypes
    }

    pub fn region(&self, r: usize) -> ArrayView2<'_, f32> {
        self.prototypes.slice(s![r, .., ..])
    }

    pub fn region_tensor(&self, r: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let view = self.region(r);
        let data: Vec<f32> = view.iter().copied().collect();
        Ok(Tensor::from_vec(data, view.dim(), device)?.to_dtype(dtype)?)
    }

    pub fn region_for(&self, loc: &GeoLocation) -> usize {
        self.grid.region_of(loc)
    }

    /// `P_r ← m P_r + (1 − m) SᵀF`.
    ///
    /// Accumulation runs in f64 over sites in ascending order and the result
    /// is rounded once to f32.
    pub fn update(&mut self, region: usize, assignment: &Array2<f64>, features: ArrayView2<f32>) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("prototype bank is frozen"));
        }
        if region >= self.grid.len() {
            return Err(Error::contract(format!("region {region} out of range")));
        }
        let (n_sites, n_p) = assignment.dim();
        if n_p != self.n_prototypes() {
            return Err(Error::shape("prototypes", self.n_prototypes(), n_p));
        }
        if features.nrows() != n_sites {
            return Err(Error::shape("sites", n_sites, features.nrows()));
        }
        if features.ncols() != self.width() {
            return Err(Error::shape("width", self.width(), features.ncols()));
        }
        let m = self.momentum as f64;
        for j in 0..n_p {
            for k in 0..self.width() {
                let mut pooled = 0.0f64;
                for s in 0..n_sites {
                    pooled += assignment[[s, j]] * features[[s, k]] as f64;
                }
                let old = self.prototypes[[region, j, k]] as f64;
                self.prototypes[[region, j, k]] = (m * old + (1.0 - m) * pooled) as f32;
            }
        }
        Ok(())
    }
}

/// Cosine similarity `[N_S, N_p]` between rows of `features` and `prototypes`.
pub fn cosine_similarity(features: ArrayView2<f32>, prototypes: ArrayView2<f32>) -> Result<Array2<f64>> {
    if features.ncols() != prototypes.ncols() {
        return Err(Error::shape("width", prototypes.ncols(), features.ncols()));
    }
    let norms = |a: ArrayView2<f32>, what: &str| -> Result<Vec<f64>> {
        a.rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let n = r.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                if n > 0.0 && n.is_finite() {
                    Ok(n)
                } else {
                    Err(Error::contract(format!("{what} row {i} has zero or non-finite norm")))
                }
            })
            .collect()
    };
    let fn_ = norms(features, "feature")?;
    let pn = norms(prototypes, "prototype")?;
    Ok(Array2::from_shape_fn((features.nrows(), prototypes.nrows()), |(i, j)| {
        let dot: f64 = features
            .row(i)
            .iter()
            .zip(prototypes.row(j))
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        (dot / (fn_[i] * pn[j])).clamp(-1.0, 1.0)
    }))
}

/// Output of [`sinkhorn_assign`].
#[derive(Debug, Clone)]
pub struct Assignment {
    /// Transport plan `S`, rows summing to `1/N_S` and columns to `1/N_p`.
    pub plan: Array2<f64>,
    pub row_residual: f64,
    pub col_residual: f64,
}

/// Entropic assignment of sites to prototypes under uniform marginals.
///
/// Computes `S = diag(u) exp(M/ε) diag(v)` by alternating row and column
/// normalisation. Each row of `M` is shifted by its maximum before
/// exponentiation; the shift is absorbed by `u`.
pub fn sinkhorn_assign(similarity: ArrayView2<f64>, n_iters: usize, epsilon: f64) -> Result<Assignment> {
    let (n, p) = similarity.dim();
    if n == 0 || p == 0 {
        return Err(Error::contract("empty similarity matrix"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("sinkhorn epsilon {epsilon} must be positive")));
    }
    if similarity.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("similarity matrix has non-finite entries"));
    }
    let mut plan = Array2::zeros((n, p));
    for i in 0..n {
        let row = similarity.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for j in 0..p {
            plan[[i, j]] = ((row[j] - max) / epsilon).exp();
        }
    }
    let total: f64 = plan.sum();
    plan /= total;

    let (row_target, col_target) = (1.0 / n as f64, 1.0 / p as f64);
    for _ in 0..n_iters {
        for mut row in plan.rows_mut() {
            let sum: f64 = row.sum();
            if sum > f64::MIN_POSITIVE {
                row *= row_target / sum;
            }
        }
        for mut col in plan.columns_mut() {
            let sum: f64 = col.sum();
            if sum > f64::MIN_POSITIVE {
                col *= col_target / sum;
            }
        }
    }
    let row_residual = plan
        .rows()
        .into_iter()
        .map(|r| (r.sum() - row_target).abs())
        .fold(0.0, f64::max);
    let col_residual = plan
        .columns()
        .into_iter()
        .map(|c| (c.sum() - col_target).abs())
        .fold(0.0, f64::max);
    Ok(Assignment {
        plan,
        row_residual,
        col_residual,
    })
}

/// Attend features `[B, N_S, d]` to per-sample prototypes `[B, N_p, d]` and
/// concatenate: `[F, softmax(F Pᵀ/√d) P]`, width `2d`.
pub fn attend_geo_context_batch(features: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    let (_, _, d) = features.dims3()?;
    let (_, n_p, pd) = prototypes.dims3()?;
    if n_p == 0 {
        return Err(Error::contract("empty prototype set"));
    }
    if pd != d {
        return Err(Error::shape("width", d, pd));
    }
    let scores = (features.matmul(&prototypes.transpose(1, 2)?.contiguous()?)? / (d as f64).sqrt())?;
    let weights = softmax_last(&scores)?;
    let context = weights.matmul(prototypes)?;
    Ok(Tensor::cat(&[features, &context], D::Minus1)?)
}

/// Single-sample geo-context integration on a fused volume `[N_S, 1, d]`.
pub fn attend_geo_context(fused: &FeatureVolume, prototypes: &Tensor) -> Result<FeatureVolume> {
    if fused.len_t() != 1 {
        return Err(Error::shape("time", 1, fused.len_t()));
    }
    let f = fused.data().squeeze(1)?.unsqueeze(0)?;
    let p = prototypes.to_dtype(f.dtype())?.unsqueeze(0)?;
    let out = attend_geo_context_batch(&f, &p)?.squeeze(0)?.unsqueeze(1)?;
    FeatureVolume::new(out, fused.spatial_shape(), AxisKind::Fused)
}

/// Most similar prototype per feature site.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeRaster {
    pub sample_id: String,
    pub region: usize,
    /// Global prototype ids `region * N_p + j`, shape `(h, w)`.
    pub ids: Array2<u32>,
}

impl PrototypeRaster {
    pub fn present_ids(&self) -> BTreeSet<u32> {
        self.ids.iter().copied().collect()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.ids.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for ((y, x), &id) in self.ids.indexed_iter() {
            img.put_pixel(x as u32, y as u32, image::Rgb(prototype_color(id)));
        }
        img.save(path)?;
        Ok(())
    }

    /// `{ "<id>": "#rrggbb" }` for exactly the ids present.
    pub fn legend(&self) -> serde_json::Map<String, serde_json::Value> {
        self.present_ids()
            .into_iter()
            .map(|id| {
                let [r, g, b] = prototype_color(id);
                (id.to_string(), serde_json::Value::String(format!("#{r:02x}{g:02x}{b:02x}")))
            })
            .collect()
    }
}

/// Deterministic, well-spread colour per prototype id.
pub fn prototype_color(id: u32) -> [u8; 3] {
    let hue = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let light = 0.55 + 0.3 * ((id / 7) % 2) as f64;
    let (sat, val) = (0.75, light);
    let c = val * sat;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r, g, b].map(|v| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Argmax-cosine prototype raster for one fused volume.
pub fn render_prototype_map(
    sample_id: &str,
    fused: &FeatureVolume,
    location: &GeoLocation,
    bank: &PrototypeBank,
) -> Result<PrototypeRaster> {
    let region = bank.region_for(location);
    let feats = volume_slice(fused, 0)?;
    let sim = cosine_similarity(feats.view(), bank.region(region))?;
    let (h, w) = fused.spatial_shape();
    let n_p = bank.n_prototypes() as u32;
    let ids = Array2::from_shape_fn((h, w), |(y, x)| {
        let row = sim.row(y * w + x);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        region as u32 * n_p + best as u32
    });
    Ok(PrototypeRaster {
        sample_id: sample_id.to_string(),
        region,
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain alternating normalisation, no max shift, run long.
    fn oracle_sinkhorn(m: &Array2<f64>, eps: f64, iters: usize) -> Array2<f64> {
        let (n, p) = m.dim();
        let mut s = m.mapv(|v| (v / eps).exp());
        for _ in 0..iters {
            for i in 0..n {
                let r: f64 = (0..p).map(|j| s[[i, j]]).sum();
                for j in 0..p {
                    s[[i, j]] /= r * n as f64;
                }
            }
            for j in 0..p {
                let c: f64 = (0..n).map(|i| s[[i, j]]).sum();
                for i in 0..n {
                    s[[i, j]] /= c * p as f64;
                }
            }
        }
        s
    }

    #[test]
    fn region_lookup() {
        let grid = RegionIndex::new(4, 4);
        for r in 0..grid.len() {
            assert_eq!(grid.region_of(&grid.cell_center(r)), r);
        }
        // Floor-division oracle on the boundaries.
        let west = GeoLocation { latitude: 0.0, longitude: -180.0 };
        let east = GeoLocation { latitude: 0.0, longitude: 180.0_f64.next_down() };
        assert_eq!(grid.region_of(&west) % grid.cols, 0);
        assert_eq!(grid.region_of(&east) % grid.cols, grid.cols - 1);
        let north = GeoLocation { latitude: 90.0, longitude: 0.0 };
        assert_eq!(grid.region_of(&north) / grid.cols, grid.rows - 1);
        assert_eq!(RegionIndex::paper_scale().len(), 4096);
    }

    #[test]
    fn cosine_cases() {
        let f = array![[1.0f32, 0.0], [0.0, 2.0], [3.0, 4.0]];
        let p = array![[1.0f32, 0.0], [0.0, -1.0]];
        let m = cosine_similarity(f.view(), p.view()).unwrap();
        assert_abs_diff_eq!(m[[0, 0]], 1.0);
        assert_abs_diff_eq!(m[[0, 1]], 0.0);
        assert_abs_diff_eq!(m[[1, 1]], -1.0);
        // Per-entry dot/norm oracle.
        assert_abs_diff_eq!(m[[2, 0]], 3.0 / 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m[[2, 1]], -4.0 / 5.0, epsilon = 1e-12);
        let zero = array![[0.0f32, 0.0]];
        assert!(cosine_similarity(zero.view(), p.view()).is_err());
    }

    #[test]
    fn sinkhorn_constant_is_uniform() {
        let m = Array2::from_elem((4, 3), 0.3);
        let a = sinkhorn_assign(m.view(), 3, 0.05).unwrap();
        for v in a.plan.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 12.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sinkhorn_diagonal_limit() {
        let mut m = Array2::from_elem((5, 5), -0.5);
        for i in 0..5 {
            m[[i, i]] = 0.9;
        }
        let a = sinkhorn_assign(m.view(), 50, 0.01).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 0.2 } else { 0.0 };
                assert_abs_diff_eq!(a.plan[[i, j]], want, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn sinkhorn_matches_oracle_3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let a = sinkhorn_assign(m.view(), 200, 0.05).unwrap();
        let o = oracle_sinkhorn(&m, 0.05, 200);
        let diff = (&a.plan - &o).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(diff < 1e-5, "max |dS| = {diff}");
    }

    #[test]
    fn sinkhorn_survives_large_logits() {
        let m = array![[1.0e3, -1.0e3], [5.0, 4.0]];
        let a = sinkhorn_assign(m.view(), 20, 0.05).unwrap();
        assert!(a.plan.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sinkhorn_marginals(seed in any::<u64>(), n in 1usize..=16, p in 1usize..=16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Array2::from_shape_fn((n, 64), |_| rng.sample::<f32, _>(StandardNormal));
            let q = Array2::from_shape_fn((p, 64), |_| rng.sample::<f32, _>(StandardNormal));
            let m = cosine_similarity(f.view(), q.view()).unwrap();
            // The last sweep fixes columns exactly; rows close in monotonically.
            // Near-degenerate kernels (about 1 in 10^4 draws) need more than 200 sweeps.
            let short = sinkhorn_assign(m.view(), 100, 0.05).unwrap();
            let a = sinkhorn_assign(m.view(), 200, 0.05).unwrap();
            let long = sinkhorn_assign(m.view(), 5000, 0.05).unwrap();
            prop_assert!(a.col_residual < 1e-12);
            prop_assert!(a.row_residual <= short.row_residual + 1e-15);
            prop_assert!(long.row_residual < 1e-4 && long.col_residual < 1e-4);
            prop_assert!(a.plan.iter().all(|v| *v >= 0.0));
        }
    }

    fn bank(n_p: usize, d: usize, m: f32) -> PrototypeBank {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        PrototypeBank::new_random(RegionIndex::new(2, 2), n_p, d, m, &mut rng).unwrap()
    }

    /// Straight-line `SᵀF` in f64, sites ascending.
    fn pooled(s: &Array2<f64>, f: &Array2<f32>, j: usize, k: usize) -> f64 {
        let mut acc = 0.0;
        for i in 0..s.nrows() {
            acc += s[[i, j]] * f[[i, k]] as f64;
        }
        acc
    }

    #[test]
    fn prototype_update_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Array2::from_shape_fn((6, 3), |_| rng.gen_range(0.0..0.1));
        let f = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0f32..1.0));

        let mut b0 = bank(3, 4, 0.0);
        let before = b0.clone();
        b0.update(2, &s, f.view()).unwrap();
        for j in 0..3 {
            for k in 0..4 {
                assert_eq!(b0.region(2)[[j, k]], pooled(&s, &f, j, k) as f32);
            }
        }
        for r in [0, 1, 3] {
            assert_eq!(b0.region(r), before.region(r));
        }

        let mut b9 = bank(3, 4, 0.9);
        let old = b9.clone();
        b9.update(1, &s, f.view()).unwrap();
        for j in 0..3 {
            for k in 0..4 {
                let want = (0.9f32 as f64 * old.region(1)[[j, k]] as f64
                    + (1.0 - 0.9f32 as f64) * pooled(&s, &f, j, k)) as f32;
                assert_eq!(b9.region(1)[[j, k]], want);
            }
        }

        let zero = Array2::zeros((6, 3));
        let mut bz = bank(3, 4, 0.9);
        let oldz = bz.clone();
        bz.update(0, &zero, f.view()).unwrap();
        for (a, b) in bz.region(0).iter().zip(oldz.region(0).iter()) {
            assert_eq!(*a, (0.9f32 as f64 * *b as f64) as f32);
        }
    }

    #[test]
    fn frozen_bank_rejects_updates() {
        let mut b = bank(2, 3, 0.5);
        b.freeze();
        let snapshot = b.clone();
        let err = b.update(0, &Array2::zeros((1, 2)), Array2::<f32>::zeros((1, 3)).view());
        assert!(err.is_err());
        assert_eq!(b, snapshot);
        assert!(PrototypeBank::from_array(RegionIndex::new(1, 1), Array3::zeros((1, 1, 1)), 1.0).is_err());
    }

    fn volume(rows: &[[f32; 2]]) -> FeatureVolume {
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        let t = Tensor::from_vec(data, (rows.len(), 1, 2), &Device::Cpu).unwrap();
        FeatureVolume::new(t, (1, rows.len()), AxisKind::Fused).unwrap()
    }

    #[test]
    fn geo_attention_single_prototype() {
        let f = volume(&[[1.0, 2.0], [-3.0, 0.5]]);
        let p = Tensor::new(&[[0.25f32, -0.75]], &Device::Cpu).unwrap();
        let out = attend_geo_context(&f, &p).unwrap();
        assert_eq!(out.width(), 4);
        let v = out.data().squeeze(1).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(v[0], vec![1.0, 2.0, 0.25, -0.75]);
        assert_eq!(v[1], vec![-3.0, 0.5, 0.25, -0.75]);
    }

    #[test]
    fn geo_attention_matches_softmax_oracle() {
        let f = volume(&[[0.3, -1.2]]);
        let p = Tensor::new(&[[1.0f32, 0.5], [-0.4, 0.8]], &Device::Cpu).unwrap();
        let out = attend_geo_context(&f, &p).unwrap();
        let v = out.data().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let s = 2f64.sqrt();
        let a0 = (0.3 * 1.0 + -1.2 * 0.5) / s;
        let a1 = (0.3 * -0.4 + -1.2 * 0.8) / s;
        let (e0, e1) = ((a0 as f64).exp(), (a1 as f64).exp());
        let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        assert_eq!(&v[..2], &[0.3, -1.2]);
        assert_abs_diff_eq!(v[2] as f64, w0 * 1.0 + w1 * -0.4, epsilon = 1e-6);
        assert_abs_diff_eq!(v[3] as f64, w0 * 0.5 + w1 * 0.8, epsilon = 1e-6);
        let empty = Tensor::zeros((0, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(attend_geo_context(&f, &empty).is_err());
    }

    #[test]
    fn raster_is_argmax_and_scale_invariant() {
        let b = bank(4, 2, 0.5);
        let loc = RegionIndex::new(2, 2).cell_center(3);
        let constant = volume(&[[0.4, 0.1]; 6]);
        let r = render_prototype_map("c", &constant, &loc, &b).unwrap();
        assert_eq!(r.present_ids().len(), 1);

        let f = volume(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2], [0.3, -0.9]]);
        let r = render_prototype_map("x", &f, &loc, &b).unwrap();
        let sim = cosine_similarity(volume_slice(&f, 0).unwrap().view(), b.region(3)).unwrap();
        for s in 0..4 {
            let row = sim.row(s);
            let best = (0..4).max_by(|&a, &c| row[a].partial_cmp(&row[c]).unwrap()).unwrap();
            assert_eq!(r.ids[[0, s]], 3 * 4 + best as u32);
        }

        let scaled = PrototypeBank::from_array(b.grid(), b.prototypes().mapv(|v| v * 7.5), 0.5).unwrap();
        assert_eq!(render_prototype_map("x", &f, &loc, &scaled).unwrap().ids, r.ids);
        assert_eq!(r.legend().len(), r.present_ids().len());
    }
}
