use candle_core::{DType, Device, Tensor, D};
use ndarray::{Array3, Array4, Axis};

use super::augment::View;
use crate::config::{Config, ModelConfig};
use crate::data::{Modality, SampleShape};
use crate::encoder::SpatialEncoder;
use crate::fusion::{concat_time_axis, FusionModule};
use crate::nn::{Init, Linear, Mlp, ParamStore};
use crate::Result;

/// Feature sources that receive contrastive losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Hr,
    Ms,
    Sar,
    Fused,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Hr, Source::Ms, Source::Sar, Source::Fused];

    pub fn key(self) -> &'static str {
        match self {
            Source::Hr => "HR",
            Source::Ms => "Ms",
            Source::Sar => "SAR",
            Source::Fused => "fused",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// MLP into an L2-normalised bottleneck followed by a weight-normalised,
/// bias-free output layer, so logits are cosines in `[-1, 1]` whatever the
/// feature scale.
#[derive(Debug, Clone)]
pub struct ContrastHead {
    pub mlp: Mlp,
    /// Output directions `[bottleneck, K]`; columns are normalised on use.
    pub last: Tensor,
}

fn l2_normalize_rows(x: &Tensor) -> candle_core::Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    x.broadcast_div(&n)
}

impl ContrastHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, bottleneck: usize, d_out: usize) -> Result<Self> {
        let mlp = Mlp::new(store, &format!("{prefix}/mlp"), d_in, hidden, bottleneck)?;
        let last = store.param(&format!("{prefix}/last"), &[bottleneck, d_out], Init::TruncNormal(1.0))?;
        Ok(ContrastHead { mlp, last })
    }

    pub fn d_out(&self) -> usize {
        self.last.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let d = dims[dims.len() - 1];
        let flat = x.reshape(((), d))?;
        let z = l2_normalize_rows(&self.mlp.forward(&flat)?)?;
        let w = self.last.broadcast_div(&(self.last.sqr()?.sum_keepdim(0)? + 1e-12)?.sqrt()?)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = self.d_out();
        z.matmul(&w)?.reshape(out_dims)
    }
}

#[derive(Debug, Clone)]
pub enum ProjectionHead {
    Head(ContrastHead),
    Identity,
}

impl ProjectionHead {
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            ProjectionHead::Head(h) => h.forward(x),
            ProjectionHead::Identity => Ok(x.clone()),
        }
    }

    /// Output width given input width `d`.
    pub fn d_out(&self, d: usize) -> usize {
        match self {
            ProjectionHead::Head(h) => h.d_out(),
            ProjectionHead::Identity => d,
        }
    }
}

/// Encoders, fusion, projection heads and (student only) cross-modal projections.
#[derive(Debug, Clone)]
pub struct SkySenseModel {
    pub encoders: [SpatialEncoder; 3],
    pub fusion: FusionModule,
    pub heads: [ProjectionHead; 4],
    pub align: Option<[Linear; 3]>,
}

/// Features of one batch of views.
#[derive(Debug, Clone)]
pub struct Features {
    /// Per-modality `[B, N_S, T_i, d]`, HR / Ms / SAR.
    pub per_modality: [Tensor; 3],
    /// `F_fus^mm`, `[B, N_S, d]`.
    pub fused: Tensor,
}

impl Features {
    /// Source volume as `[B, N_S, T, d]`.
    pub fn source(&self, s: Source) -> Result<Tensor> {
        Ok(match s {
            Source::Hr => self.per_modality[0].clone(),
            Source::Ms => self.per_modality[1].clone(),
            Source::Sar => self.per_modality[2].clone(),
            Source::Fused => self.fused.unsqueeze(2)?,
        })
    }

    pub fn detach(&self) -> Features {
        Features {
            per_modality: [
                self.per_modality[0].detach(),
                self.per_modality[1].detach(),
                self.per_modality[2].detach(),
            ],
            fused: self.fused.detach(),
        }
    }
}

/// Stacked view tensors `[B, T, C, H, W]` per modality.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub hr: Tensor,
    pub ms: Tensor,
    pub sar: Tensor,
    pub dates: Vec<Vec<u16>>,
}

fn stack4(items: &[&Array4<f32>], device: &Device) -> Result<Tensor> {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).expect("equal view shapes");
    let shape = stacked.shape().to_vec();
    Ok(Tensor::from_vec(stacked.into_raw_vec_and_offset().0, shape, device)?)
}

/// Stack HR images `[3, H, W]` into `[B, 1, 3, H, W]`.
pub fn stack_hr(items: &[&Array3<f32>], device: &Device) -> Result<Tensor> {
    let views: Vec<_> = items.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    let stacked = ndarray::stack(Axis(0), &views).expect("equal view shapes");
    let shape = stacked.shape().to_vec();
    Ok(Tensor::from_vec(stacked.into_raw_vec_and_offset().0, shape, device)?)
}

impl ViewBatch {
    pub fn from_views(views: &[&View], device: &Device) -> Result<Self> {
        let hr: Vec<&Array3<f32>> = views.iter().map(|v| &v.hr).collect();
        let ms: Vec<&Array4<f32>> = views.iter().map(|v| &v.ms).collect();
        let sar: Vec<&Array4<f32>> = views.iter().map(|v| &v.sar).collect();
        Ok(ViewBatch {
            hr: stack_hr(&hr, device)?,
            ms: stack4(&ms, device)?,
            sar: stack4(&sar, device)?,
            dates: views.iter().map(|v| v.dates.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

impl SkySenseModel {
    /// Build under canonical names in `store`. `with_heads` toggles the
    /// projection heads; `with_align` adds the cross-modal projections.
    pub fn new(
        store: &mut ParamStore,
        model: &ModelConfig,
        shape: &SampleShape,
        with_heads: bool,
        with_align: bool,
    ) -> Result<Self> {
        let enc = |store: &mut ParamStore, m: Modality| {
            SpatialEncoder::new(store, &format!("encoder/{}", m.key()), model.encoder(m, shape))
        };
        let encoders = [enc(store, Modality::Hr)?, enc(store, Modality::Ms)?, enc(store, Modality::Sar)?];
        let fusion = FusionModule::new(store, model.fusion())?;
        let mut heads = Vec::with_capacity(4);
        for s in Source::ALL {
            heads.push(if with_heads {
                ProjectionHead::Head(ContrastHead::new(
                    store,
                    &format!("head/{}", s.key()),
                    model.width,
                    model.head_hidden,
                    model.head_bottleneck,
                    model.head_out,
                )?)
            } else {
                ProjectionHead::Identity
            });
        }
        let heads: [ProjectionHead; 4] = heads.try_into().expect("four heads");
        let align = if with_align {
            let p = |store: &mut ParamStore, m: Modality| {
                Linear::new(store, &format!("align/{}", m.key()), model.width, model.align_dim)
            };
            Some([p(store, Modality::Hr)?, p(store, Modality::Ms)?, p(store, Modality::Sar)?])
        } else {
            None
        };
        Ok(SkySenseModel {
            encoders,
            fusion,
            heads,
            align,
        })
    }

    pub fn encoder(&self, m: Modality) -> &SpatialEncoder {
        &self.encoders[m.index()]
    }

    pub fn head(&self, s: Source) -> &ProjectionHead {
        &self.heads[s.index()]
    }

    /// Encode one modality of a batch `[B, T, C, H, W]`.
    pub fn encode(&self, m: Modality, frames: &Tensor) -> Result<Tensor> {
        self.encoder(m).forward_batch(frames)
    }

    /// Concatenate per-modality features and fuse with the given dates.
    pub fn fuse(&self, per_modality: &[Tensor], dates: &[Vec<u16>]) -> Result<Tensor> {
        let concat = concat_time_axis(per_modality, 2)?;
        self.fusion.fuse_batch(&concat, dates)
    }

    pub fn forward(&self, batch: &ViewBatch) -> Result<Features> {
        let hr = self.encode(Modality::Hr, &batch.hr)?;
        let ms = self.encode(Modality::Ms, &batch.ms)?;
        let sar = self.encode(Modality::Sar, &batch.sar)?;
        let fused = self.fuse(&[hr.clone(), ms.clone(), sar.clone()], &batch.dates)?;
        Ok(Features {
            per_modality: [hr, ms, sar],
            fused,
        })
    }
}

/// Student and EMA teacher with separate stores under identical names.
/// The teacher has no cross-modal projections and never receives gradients.
#[derive(Debug)]
pub struct TeacherStudentPair {
    pub student_store: ParamStore,
    pub teacher_store: ParamStore,
    pub student: SkySenseModel,
    pub teacher: SkySenseModel,
    pub momentum: f64,
}

impl TeacherStudentPair {
    pub fn new(config: &Config, dtype: DType) -> Result<Self> {
        Self::with_heads(config, dtype, true)
    }

    pub fn with_heads(config: &Config, dtype: DType, with_heads: bool) -> Result<Self> {
        let shape = config.world.shape;
        let mut student_store = ParamStore::new(config.train.seed, dtype);
        let student = SkySenseModel::new(&mut student_store, &config.model, &shape, with_heads, true)?;
        let mut teacher_store = ParamStore::new(config.train.seed, dtype);
        let teacher = SkySenseModel::new(&mut teacher_store, &config.model, &shape, with_heads, false)?;
        teacher_store.copy_from(&student_store)?;
        Ok(TeacherStudentPair {
            student_store,
            teacher_store,
            student,
            teacher,
            momentum: config.train.teacher_momentum,
        })
    }

    /// `θ′ ← m θ′ + (1 − m) θ`.
    pub fn update_teacher(&self) -> Result<()> {
        self.teacher_store.ema_update(&self.student_store, self.momentum)
    }
}
