//! Per-modality spatial encoders. Each frame is patch-embedded and run through
//! a small pre-norm transformer on its own, so time never mixes here.

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data::{AxisKind, FeatureVolume, Modality};
use crate::nn::{array2_to_tensor, Init, LayerNorm, Linear, ParamStore, TransformerStack};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub modality: Modality,
    /// Side of the square input frame this encoder is built for.
    pub input_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "{} input size {} is not a multiple of patch size {}",
                self.modality, self.input_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.width % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "{} width {} not divisible by {} heads",
                self.modality, self.width, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Check the three encoders emit the same `(h, w, d)`.
pub fn check_aligned(configs: &[EncoderConfig]) -> Result<()> {
    let Some(first) = configs.first() else { return Ok(()) };
    for c in &configs[1..] {
        if c.grid() != first.grid() {
            return Err(Error::Config(format!(
                "{} grid {} differs from {} grid {}",
                c.modality,
                c.grid(),
                first.modality,
                first.grid()
            )));
        }
        if c.width != first.width {
            return Err(Error::Config(format!("{} width {} differs from {}", c.modality, c.width, first.width)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    pub config: EncoderConfig,
    patch_embed: Linear,
    pos_embed: Tensor,
    blocks: TransformerStack,
    norm: LayerNorm,
}

/// Bilinear resampling matrix `[out*out, inp*inp]` (half-pixel centres).
fn resample_matrix(inp: usize, out: usize) -> Array2<f64> {
    let axis = |i: usize| -> [(usize, f64); 2] {
        let x = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let f = x - lo as f64;
        [(lo, 1.0 - f), (hi, f)]
    };
    let mut m = Array2::zeros((out * out, inp * inp));
    for r in 0..out {
        for c in 0..out {
            for (ry, wy) in axis(r) {
                for (cx, wx) in axis(c) {
                    m[[r * out + c, ry * inp + cx]] += wy * wx;
                }
            }
        }
    }
    m
}

impl SpatialEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let c = config.modality.channels();
        let p = config.patch_size;
        let g = config.grid();
        Ok(SpatialEncoder {
            config,
            patch_embed: Linear::new(store, &format!("{prefix}/patch_embed"), c * p * p, config.width)?,
            pos_embed: store.param(&format!("{prefix}/pos_embed"), &[g * g, config.width], Init::TruncNormal(0.02))?,
            blocks: TransformerStack::new(
                store,
                &format!("{prefix}/blocks"),
                config.depth,
                config.width,
                config.num_heads,
                config.mlp_ratio,
            )?,
            norm: LayerNorm::new(store, &format!("{prefix}/norm"), config.width)?,
        })
    }

    fn positions(&self, grid: usize) -> Result<Tensor> {
        let g = self.config.grid();
        if grid == g {
            return Ok(self.pos_embed.clone());
        }
        let m = resample_matrix(g, grid).mapv(|v| v as f32);
        let m = array2_to_tensor(&m, self.pos_embed.dtype(), self.pos_embed.device())?;
        Ok(m.matmul(&self.pos_embed)?)
    }

    /// `[B, T, C, H, W]` frames to `[B, N_S, T, d]` features. Square inputs whose
    /// side is a multiple of the patch size are accepted; smaller crops get
    /// interpolated position embeddings.
    pub fn forward_batch(&self, frames: &Tensor) -> Result<Tensor> {
        let dims = frames.dims();
        if dims.len() != 5 {
            return Err(Error::shape("rank", 5, dims.len()));
        }
        let (b, t, c, h, w) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
        let want_c = self.config.modality.channels();
        if c != want_c {
            return Err(Error::shape("channel", want_c, c));
        }
        let p = self.config.patch_size;
        if h % p != 0 {
            return Err(Error::shape("height", (h / p).max(1) * p, h));
        }
        if w != h {
            return Err(Error::shape("width", h, w));
        }
        let grid = h / p;
        let n = b * t;
        let x = frames
            .to_dtype(self.pos_embed.dtype())?
            .reshape(vec![n, c, grid, p, grid, p])?
            .permute(vec![0, 2, 4, 1, 3, 5])?
            .contiguous()?
            .reshape((n, grid * grid, c * p * p))?;
        let x = self.patch_embed.forward(&x)?.broadcast_add(&self.positions(grid)?)?;
        let x = self.norm.forward(&self.blocks.forward(&x)?)?;
        let d = self.config.width;
        Ok(x.reshape((b, t, grid * grid, d))?.permute((0, 2, 1, 3))?.contiguous()?)
    }

    /// Encode one sample's frames `[T, C, H, W]`.
    pub fn encode(&self, frames: &Tensor) -> Result<FeatureVolume> {
        let dims = frames.dims();
        if dims.len() != 4 {
            return Err(Error::shape("rank", 4, dims.len()));
        }
        if dims[2] != self.config.input_size {
            return Err(Error::shape("height", self.config.input_size, dims[2]));
        }
        let out = self.forward_batch(&frames.unsqueeze(0)?)?.squeeze(0)?;
        let g = self.config.grid();
        FeatureVolume::new(out, (g, g), AxisKind::PerModality)
    }

    pub fn encode_array(&self, frames: &Array4<f32>) -> Result<FeatureVolume> {
        let dims = frames.shape().to_vec();
        let data: Vec<f32> = frames.iter().copied().collect();
        let t = Tensor::from_vec(data, dims, self.pos_embed.device())?;
        self.encode(&t)
    }

    pub fn dtype(&self) -> DType {
        self.pos_embed.dtype()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::directional_grad_check;
    use candle_core::Device;

    fn config(modality: Modality, input: usize, patch: usize) -> EncoderConfig {
        EncoderConfig {
            modality,
            input_size: input,
            patch_size: patch,
            depth: 2,
            num_heads: 2,
            width: 16,
            mlp_ratio: 2,
        }
    }

    fn random_frames(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn hr_frame_shape() {
        let mut store = ParamStore::new(1, DType::F32);
        let mut cfg = config(Modality::Hr, 64, 8);
        cfg.width = 64;
        cfg.num_heads = 4;
        let enc = SpatialEncoder::new(&mut store, "encoder/HR", cfg).unwrap();
        let v = enc.encode(&random_frames(&[1, 3, 64, 64], 0, DType::F32)).unwrap();
        assert_eq!(v.data().dims(), &[64, 1, 64]);
        assert_eq!(v.spatial_shape(), (8, 8));
    }

    #[test]
    fn modalities_share_spatial_grid() {
        let cfgs = [config(Modality::Hr, 64, 8), config(Modality::Ms, 16, 2), config(Modality::Sar, 16, 2)];
        check_aligned(&cfgs).unwrap();
        let mut store = ParamStore::new(1, DType::F32);
        let mut shapes = Vec::new();
        for (cfg, t) in cfgs.iter().zip([1usize, 3, 2]) {
            let enc = SpatialEncoder::new(&mut store, &format!("encoder/{}", cfg.modality.key()), *cfg).unwrap();
            let frames = random_frames(&[t, cfg.modality.channels(), cfg.input_size, cfg.input_size], 3, DType::F32);
            let v = enc.encode(&frames).unwrap();
            assert_eq!(v.len_t(), t);
            shapes.push((v.spatial_shape(), v.width()));
        }
        assert!(shapes.windows(2).all(|w| w[0] == w[1]));
        let bad = [config(Modality::Hr, 64, 4), config(Modality::Ms, 16, 2)];
        assert!(check_aligned(&bad).is_err());
    }

    #[test]
    fn wrong_channel_count_names_axis() {
        let mut store = ParamStore::new(1, DType::F32);
        let enc = SpatialEncoder::new(&mut store, "e", config(Modality::Ms, 16, 2)).unwrap();
        let err = enc.encode(&random_frames(&[2, 3, 16, 16], 0, DType::F32)).unwrap_err();
        assert!(matches!(err, Error::Shape { ref axis, expected: 10, actual: 3 } if axis == "channel"));
        let err = enc.encode(&random_frames(&[2, 10, 12, 12], 0, DType::F32)).unwrap_err();
        assert!(matches!(err, Error::Shape { ref axis, .. } if axis == "height"));
    }

    #[test]
    fn time_permutation_commutes() {
        let mut store = ParamStore::new(5, DType::F64);
        let enc = SpatialEncoder::new(&mut store, "e", config(Modality::Sar, 8, 2)).unwrap();
        let frames = random_frames(&[4, 2, 8, 8], 9, DType::F64);
        let perm = [2u32, 0, 3, 1];
        let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
        let a = enc.encode(&frames.index_select(&idx, 0).unwrap()).unwrap();
        let b = enc.encode(&frames).unwrap().data().index_select(&idx, 1).unwrap();
        let diff = (a.data() - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn deterministic_given_parameters() {
        let mut s1 = ParamStore::new(5, DType::F32);
        let mut s2 = ParamStore::new(5, DType::F32);
        let e1 = SpatialEncoder::new(&mut s1, "e", config(Modality::Ms, 16, 2)).unwrap();
        let e2 = SpatialEncoder::new(&mut s2, "e", config(Modality::Ms, 16, 2)).unwrap();
        let f = random_frames(&[2, 10, 16, 16], 1, DType::F32);
        let a = e1.encode(&f).unwrap().into_data().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = e2.encode(&f).unwrap().into_data().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resample_preserves_constants_and_identity() {
        let m = resample_matrix(4, 2);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let id = resample_matrix(3, 3);
        assert_eq!(id, Array2::<f64>::eye(9));
    }

    #[test]
    fn local_crop_uses_interpolated_positions() {
        let mut store = ParamStore::new(1, DType::F32);
        let enc = SpatialEncoder::new(&mut store, "e", config(Modality::Hr, 64, 8)).unwrap();
        let out = enc.forward_batch(&random_frames(&[2, 1, 3, 32, 32], 0, DType::F32)).unwrap();
        assert_eq!(out.dims(), &[2, 16, 1, 16]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut store = ParamStore::new(11, DType::F64);
        let enc = SpatialEncoder::new(&mut store, "e", config(Modality::Ms, 4, 2)).unwrap();
        let frames = random_frames(&[2, 10, 4, 4], 2, DType::F64);
        let probe = random_frames(&[4, 2, 16], 3, DType::F64);
        let report = directional_grad_check(&store, 17, 1e-5, || {
            let v = enc.encode(&frames)?;
            Ok((v.data() * &probe)?.sum_all()?)
        })
        .unwrap();
        assert!(report.rel_error < 1e-3, "{report:?}");
    }
}
