//! Downstream use of pre-trained modules: choose encoders, optionally fuse
//! and add geo-context, then train a linear probe (frozen) or fine-tune.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, ProbeConfig};
use crate::data::{AxisKind, FeatureVolume, Modality, MultiModalSample};
use crate::encoder::SpatialEncoder;
use crate::exec::{try_map_range, ExecMode};
use crate::fusion::{concat_time_axis, FusionModule};
use crate::geo::{attend_geo_context_batch, render_prototype_map, PrototypeBank, PrototypeRaster, RegionIndex};
use crate::metrics::{adjusted_rand_index, ConfusionMatrix};
use crate::nn::{log_softmax_last, AdamW, AdamWConfig, Init, LrSchedule, ParamStore};
use crate::pretrain::model::stack_hr;
use crate::synth::{downsample_labels, stream_rng};
use crate::{Error, Result};

const PROBE_STREAM: u64 = 0x960B_E000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// One label per sample from pooled features.
    LinearClassifier,
    /// One label per feature site.
    PerPixelLinear,
}

/// Which pre-trained modules a task uses and which of them stay frozen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAssembly {
    /// Subset of modalities, kept in HR, Ms, SAR order.
    pub modalities: Vec<Modality>,
    pub use_fusion: bool,
    pub use_geo_context: bool,
    pub freeze_backbone: bool,
    pub freeze_fusion: bool,
    pub head: HeadKind,
}

impl TaskAssembly {
    pub fn new(
        modalities: &[Modality],
        use_fusion: bool,
        use_geo_context: bool,
        freeze_backbone: bool,
        head: HeadKind,
    ) -> Result<Self> {
        let mut mods: Vec<Modality> = Modality::ALL.iter().copied().filter(|m| modalities.contains(m)).collect();
        mods.dedup();
        let a = TaskAssembly {
            modalities: mods,
            use_fusion,
            use_geo_context,
            freeze_backbone,
            freeze_fusion: freeze_backbone,
            head,
        };
        a.validate()?;
        Ok(a)
    }

    /// Parse `hr+ms+sar,fusion,geo,frozen,pixel`. Flags: `fusion`, `geo`,
    /// `frozen` / `finetune`, `fusion-frozen` / `fusion-trainable`,
    /// `pixel` / `classifier`. Defaults: no fusion, no geo, frozen, pixel.
    pub fn parse(text: &str) -> Result<Self> {
        let mut parts = text.split(',').map(str::trim);
        let mods_text = parts.next().unwrap_or("");
        let mut mods = Vec::new();
        for m in mods_text.split('+') {
            mods.push(Modality::parse(m).ok_or_else(|| Error::Config(format!("unknown modality `{m}`")))?);
        }
        let mut a = TaskAssembly {
            modalities: Vec::new(),
            use_fusion: false,
            use_geo_context: false,
            freeze_backbone: true,
            freeze_fusion: true,
            head: HeadKind::PerPixelLinear,
        };
        let mut fusion_flag = None;
        for flag in parts {
            match flag {
                "fusion" => a.use_fusion = true,
                "geo" => a.use_geo_context = true,
                "frozen" => a.freeze_backbone = true,
                "finetune" => a.freeze_backbone = false,
                "fusion-frozen" => fusion_flag = Some(true),
                "fusion-trainable" => fusion_flag = Some(false),
                "pixel" => a.head = HeadKind::PerPixelLinear,
                "classifier" => a.head = HeadKind::LinearClassifier,
                other => return Err(Error::Config(format!("unknown assembly flag `{other}`"))),
            }
        }
        a.freeze_fusion = fusion_flag.unwrap_or(a.freeze_backbone);
        a.modalities = Modality::ALL.iter().copied().filter(|m| mods.contains(m)).collect();
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("assembly selects no modality".into()));
        }
        let temporal = self.modalities.iter().any(|m| *m != Modality::Hr);
        if (temporal || self.modalities.len() > 1) && !self.use_fusion {
            return Err(Error::Config("temporal or multi-modal assemblies need the fusion module".into()));
        }
        Ok(())
    }

    pub fn uses(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }

    /// Whether only the head is trained, so features can be cached.
    pub fn head_only(&self) -> bool {
        self.freeze_backbone && (!self.use_fusion || self.freeze_fusion)
    }

    pub fn with_modalities(&self, modalities: &[Modality]) -> Result<Self> {
        let mut a = self.clone();
        a.modalities = Modality::ALL.iter().copied().filter(|m| modalities.contains(m)).collect();
        a.validate()?;
        Ok(a)
    }
}

impl fmt::Display for TaskAssembly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mods: Vec<String> = self.modalities.iter().map(|m| m.key().to_lowercase()).collect();
        write!(f, "{}", mods.join("+"))?;
        if self.use_fusion {
            write!(f, ",fusion")?;
        }
        if self.use_geo_context {
            write!(f, ",geo")?;
        }
        write!(f, ",{}", if self.freeze_backbone { "frozen" } else { "finetune" })?;
        if self.use_fusion && self.freeze_fusion != self.freeze_backbone {
            write!(f, ",{}", if self.freeze_fusion { "fusion-frozen" } else { "fusion-trainable" })?;
        }
        write!(
            f,
            ",{}",
            match self.head {
                HeadKind::PerPixelLinear => "pixel",
                HeadKind::LinearClassifier => "classifier",
            }
        )
    }
}

/// The modules an assembly needs, under canonical parameter names.
#[derive(Debug)]
pub struct Backbone {
    pub store: ParamStore,
    pub encoders: [Option<SpatialEncoder>; 3],
    pub fusion: Option<FusionModule>,
    pub bank: Option<PrototypeBank>,
    pub assembly: TaskAssembly,
}

fn load_prefix(store: &ParamStore, ck: &Checkpoint, prefix: &str, module: &str) -> Result<()> {
    for name in store.names().filter(|n| n.starts_with(prefix)) {
        let (shape, values) = ck.get(name).ok_or_else(|| Error::MissingModule(module.to_string()))?;
        let t = Tensor::from_vec(values.to_vec(), shape, store.device())?;
        store
            .set(name, &t)
            .map_err(|e| Error::MissingModule(format!("{module} ({e})")))?;
    }
    Ok(())
}

impl Backbone {
    /// Freshly initialised modules (seeded by `config.train.seed`).
    pub fn random(config: &Config, assembly: &TaskAssembly, bank: Option<PrototypeBank>) -> Result<Self> {
        assembly.validate()?;
        let mut store = ParamStore::new(config.train.seed, DType::F32);
        let shape = config.world.shape;
        let mut encoders: [Option<SpatialEncoder>; 3] = [None, None, None];
        for m in &assembly.modalities {
            encoders[m.index()] = Some(SpatialEncoder::new(
                &mut store,
                &format!("encoder/{}", m.key()),
                config.model.encoder(*m, &shape),
            )?);
        }
        let fusion = if assembly.use_fusion {
            Some(FusionModule::new(&mut store, config.model.fusion())?)
        } else {
            None
        };
        let bank = match (assembly.use_geo_context, bank) {
            (true, Some(mut b)) => {
                b.freeze();
                Some(b)
            }
            (true, None) => return Err(Error::MissingModule("geo/prototypes".into())),
            (false, _) => None,
        };
        Ok(Backbone {
            store,
            encoders,
            fusion,
            bank,
            assembly: assembly.clone(),
        })
    }

    /// Load only the modules `assembly` needs from a pre-training checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, config: &Config, assembly: &TaskAssembly) -> Result<Self> {
        let bank = if assembly.use_geo_context {
            Some(bank_from_checkpoint(ck, config)?)
        } else {
            None
        };
        let bb = Self::random(config, assembly, bank)?;
        for m in &assembly.modalities {
            let prefix = format!("encoder/{}/", m.key());
            if !ck.has_prefix(&prefix) {
                return Err(Error::MissingModule(format!("encoder/{}", m.key())));
            }
            load_prefix(&bb.store, ck, &prefix, &format!("encoder/{}", m.key()))?;
        }
        if assembly.use_fusion {
            if !ck.has_prefix("fusion/") || !ck.contains(crate::fusion::DTPE_KEY) {
                return Err(Error::MissingModule("fusion".into()));
            }
            load_prefix(&bb.store, ck, "fusion/", "fusion")?;
            load_prefix(&bb.store, ck, "dtpe/", "fusion")?;
        }
        Ok(bb)
    }

    fn encoder(&self, m: Modality) -> Result<&SpatialEncoder> {
        self.encoders[m.index()]
            .as_ref()
            .ok_or_else(|| Error::MissingModule(format!("encoder/{}", m.key())))
    }

    /// Features `[B, N_S, d]` (or `2d` with geo-context). Frozen parts are
    /// detached according to the assembly.
    pub fn forward(&self, samples: &[&MultiModalSample]) -> Result<Tensor> {
        let device = Device::Cpu;
        let mut per_mod = Vec::new();
        let mut dates: Vec<Vec<u16>> = vec![Vec::new(); samples.len()];
        for m in &self.assembly.modalities {
            let enc = self.encoder(*m)?;
            let frames = match m {
                Modality::Hr => {
                    let imgs: Vec<_> = samples.iter().map(|s| &s.hr_image).collect();
                    stack_hr(&imgs, &device)?
                }
                Modality::Ms | Modality::Sar => {
                    let series: Vec<_> = samples
                        .iter()
                        .map(|s| if *m == Modality::Ms { s.ms_series.view() } else { s.sar_series.view() })
                        .collect();
                    if let Some(s) = series.iter().find(|s| s.shape()[0] == 0) {
                        let _ = s;
                        return Err(Error::contract(format!("sample has no {m} frames")));
                    }
                    let stacked = ndarray::stack(ndarray::Axis(0), &series)
                        .map_err(|_| Error::contract(format!("{m} series differ in shape")))?;
                    let shape = stacked.shape().to_vec();
                    Tensor::from_vec(stacked.into_raw_vec_and_offset().0, shape, &device)?
                }
            };
            let mut f = enc.forward_batch(&frames)?;
            if self.assembly.freeze_backbone {
                f = f.detach();
            }
            per_mod.push(f);
            for (d, s) in dates.iter_mut().zip(samples) {
                match m {
                    Modality::Hr => d.push(s.hr_date()),
                    Modality::Ms => d.extend_from_slice(s.ms_dates()),
                    Modality::Sar => d.extend_from_slice(s.sar_dates()),
                }
            }
        }
        let mut x = match &self.fusion {
            Some(fusion) => {
                let concat = concat_time_axis(&per_mod, 2)?;
                let out = fusion.fuse_batch(&concat, &dates)?;
                if self.assembly.freeze_fusion {
                    out.detach()
                } else {
                    out
                }
            }
            None => per_mod[0].squeeze(2)?,
        };
        if let Some(bank) = &self.bank {
            let protos: Vec<Tensor> = samples
                .iter()
                .map(|s| bank.region_tensor(bank.region_for(&s.location), DType::F32, &device))
                .collect::<Result<_>>()?;
            x = attend_geo_context_batch(&x, &Tensor::stack(&protos, 0)?)?;
        }
        Ok(x)
    }

    /// Feature volume of one sample, `[N_S, 1, d]` or `[N_S, 1, 2d]`.
    pub fn extract_features(&self, sample: &MultiModalSample) -> Result<FeatureVolume> {
        let x = self.forward(&[sample])?.squeeze(0)?.unsqueeze(1)?;
        let g = self.grid();
        let kind = if self.fusion.is_some() || self.bank.is_some() {
            AxisKind::Fused
        } else {
            AxisKind::PerModality
        };
        FeatureVolume::new(x, (g, g), kind)
    }

    pub fn grid(&self) -> usize {
        self.encoders.iter().flatten().next().map_or(0, |e| e.config.grid())
    }

    /// Parameter digest used to assert the freeze contract.
    pub fn fingerprint(&self) -> Result<String> {
        self.store.fingerprint()
    }

    pub fn bank_bytes(&self) -> Option<Vec<u8>> {
        self.bank
            .as_ref()
            .map(|b| b.prototypes().iter().flat_map(|v| v.to_le_bytes()).collect())
    }
}

pub fn bank_from_checkpoint(ck: &Checkpoint, config: &Config) -> Result<PrototypeBank> {
    let (shape, values) = ck
        .get("geo/prototypes")
        .ok_or_else(|| Error::MissingModule("geo/prototypes".into()))?;
    if shape.len() != 3 {
        return Err(Error::MissingModule("geo/prototypes (bad rank)".into()));
    }
    let grid = match ck.meta.get("region_grid").and_then(|v| v.as_array()) {
        Some(g) if g.len() == 2 => RegionIndex::new(
            g[0].as_u64().unwrap_or(1) as usize,
            g[1].as_u64().unwrap_or(1) as usize,
        ),
        _ => RegionIndex::new(config.world.region_grid[0], config.world.region_grid[1]),
    };
    let arr = ndarray::Array3::from_shape_vec((shape[0], shape[1], shape[2]), values.to_vec())
        .map_err(|e| Error::MissingModule(format!("geo/prototypes ({e})")))?;
    let mut bank = PrototypeBank::from_array(grid, arr, config.geo.momentum)?;
    bank.freeze();
    Ok(bank)
}

/// Per-site labels (majority of the HR pixels under each site), row-major.
pub fn site_labels(sample: &MultiModalSample, grid: usize) -> Result<Vec<usize>> {
    let labels = sample
        .labels
        .as_ref()
        .ok_or_else(|| Error::Dataset(format!("sample {} has no labels", sample.id)))?;
    let factor = labels.nrows() / grid;
    let down = downsample_labels(labels, factor);
    Ok(down.iter().map(|&v| v.max(0) as usize).collect())
}

/// Label of the whole sample: its most frequent site label.
pub fn image_label(sites: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &s in sites {
        *counts.entry(s).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(c, _)| c)
}

/// Linear head with fixed input standardisation.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub weight: Array2<f32>,
    pub bias: Vec<f32>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub head: HeadKind,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let dev = x.device();
        let mean = Tensor::from_vec(self.mean.clone(), self.mean.len(), dev)?;
        let std = Tensor::from_vec(self.std.clone(), self.std.len(), dev)?;
        let z = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        Ok(z.matmul(w)?.broadcast_add(b)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let dev = x.device();
        let (din, c) = self.weight.dim();
        let w = Tensor::from_vec(self.weight.iter().copied().collect(), (din, c), dev)?;
        let b = Tensor::from_vec(self.bias.clone(), c, dev)?;
        let logits = self.logits(x, &w, &b)?;
        Ok(logits.argmax(D::Minus1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect())
    }

    pub fn to_checkpoint(&self, config_hash: &str, assembly: &TaskAssembly) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(0, config_hash, serde_json::json!({ "assembly": assembly.to_string() }));
        let (din, c) = self.weight.dim();
        ck.insert("probe/head/weight", vec![din, c], self.weight.iter().copied().collect())?;
        ck.insert("probe/head/bias", vec![c], self.bias.clone())?;
        ck.insert("probe/feature_mean", vec![din], self.mean.clone())?;
        ck.insert("probe/feature_std", vec![din], self.std.clone())?;
        Ok(ck)
    }
}

fn standardisation(x: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let x = x.to_dtype(DType::F64)?;
    let mean = x.mean(0)?;
    let var = x.broadcast_sub(&mean)?.sqr()?.mean(0)?;
    let mean: Vec<f32> = mean.to_vec1::<f64>()?.into_iter().map(|v| v as f32).collect();
    let std: Vec<f32> = var.to_vec1::<f64>()?.into_iter().map(|v| (v.sqrt() as f32).max(1e-6)).collect();
    Ok((mean, std))
}

fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&labels.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

fn probe_optimizer(cfg: &ProbeConfig, lr: f64) -> AdamW {
    AdamW::new(
        AdamWConfig {
            beta2: 0.99,
            weight_decay: cfg.weight_decay,
            grad_clip: None,
            ..Default::default()
        },
        LrSchedule {
            base_lr: lr,
            min_lr: lr * 0.1,
            warmup_steps: 0,
            total_steps: cfg.steps as u64,
        },
    )
}

/// Train a linear head on fixed features `[N, D]` with labels in `[0, C)`.
pub fn train_linear_head(features: &Tensor, labels: &[usize], num_classes: usize, cfg: &ProbeConfig, head: HeadKind) -> Result<LinearProbe> {
    let (n, din) = features.dims2()?;
    if n != labels.len() {
        return Err(Error::shape("labels", n, labels.len()));
    }
    let (mean, std) = standardisation(features)?;
    let mut store = ParamStore::new(cfg.seed, DType::F32);
    let w = store.param("probe/head/weight", &[din, num_classes], Init::Zeros)?;
    let b = store.param("probe/head/bias", &[num_classes], Init::Zeros)?;
    let mut probe = LinearProbe {
        weight: Array2::zeros((din, num_classes)),
        bias: vec![0.0; num_classes],
        mean,
        std,
        head,
    };
    let y: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let y = Tensor::from_vec(y, n, features.device())?;
    let mut opt = probe_optimizer(cfg, cfg.lr);
    let mut rng = stream_rng(cfg.seed, PROBE_STREAM);
    let mut order: Vec<u32> = (0..n as u32).collect();
    for _ in 0..cfg.steps {
        let (x, t) = if cfg.batch_sites > 0 && cfg.batch_sites < n {
            order.shuffle(&mut rng);
            let idx = Tensor::from_vec(order[..cfg.batch_sites].to_vec(), cfg.batch_sites, features.device())?;
            (features.index_select(&idx, 0)?, y.index_select(&idx, 0)?)
        } else {
            (features.clone(), y.clone())
        };
        let loss = cross_entropy(&probe.logits(&x, &w, &b)?, &t)?;
        let grads = loss.backward()?;
        opt.step(&store, &grads)?;
    }
    let wv = w.flatten_all()?.to_vec1::<f32>()?;
    probe.weight = Array2::from_shape_vec((din, num_classes), wv).expect("shape");
    probe.bias = b.to_vec1::<f32>()?;
    Ok(probe)
}

/// Features and targets of `samples` in probe layout: one row per site
/// (pixel head) or per sample (classifier head).
pub fn probe_rows(
    backbone: &Backbone,
    samples: &[&MultiModalSample],
    mode: ExecMode,
) -> Result<(Tensor, Vec<usize>)> {
    const CHUNK: usize = 16;
    let grid = backbone.grid();
    let chunks: Vec<&[&MultiModalSample]> = samples.chunks(CHUNK).collect();
    let parts = try_map_range(mode, chunks.len(), |i| -> Result<(Tensor, Vec<usize>)> {
        let x = backbone.forward(chunks[i])?.detach();
        let (b, n_s, d) = x.dims3()?;
        let mut labels = Vec::new();
        for s in chunks[i] {
            let sites = site_labels(s, grid)?;
            match backbone.assembly.head {
                HeadKind::PerPixelLinear => labels.extend(sites),
                HeadKind::LinearClassifier => labels.push(image_label(&sites)),
            }
        }
        let x = match backbone.assembly.head {
            HeadKind::PerPixelLinear => x.reshape((b * n_s, d))?,
            HeadKind::LinearClassifier => x.mean(1)?,
        };
        Ok((x, labels))
    })?;
    let xs: Vec<Tensor> = parts.iter().map(|p| p.0.clone()).collect();
    let labels = parts.into_iter().flat_map(|p| p.1).collect();
    Ok((Tensor::cat(&xs, 0)?, labels))
}

/// Trained probe plus training summary.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub probe: LinearProbe,
    pub train_accuracy: f64,
    pub backbone_unchanged: bool,
}

/// Train a probe on `train`. Frozen assemblies cache features and fit the
/// head alone; otherwise the unfrozen modules are fine-tuned together with
/// the head. The freeze contract is checked on return.
pub fn train_probe(
    backbone: &Backbone,
    train: &[&MultiModalSample],
    num_classes: usize,
    cfg: &ProbeConfig,
    mode: ExecMode,
) -> Result<ProbeResult> {
    if train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let before = backbone.fingerprint()?;
    let bank_before = backbone.bank_bytes();
    let probe = if backbone.assembly.head_only() {
        let (x, y) = probe_rows(backbone, train, mode)?;
        train_linear_head(&x, &y, num_classes, cfg, backbone.assembly.head)?
    } else {
        finetune(backbone, train, num_classes, cfg, mode)?
    };
    let after = backbone.fingerprint()?;
    let unchanged = before == after;
    if backbone.assembly.freeze_backbone && backbone.assembly.freeze_fusion && !unchanged {
        return Err(Error::contract("frozen backbone changed during probe training"));
    }
    if bank_before != backbone.bank_bytes() {
        return Err(Error::contract("frozen prototype bank changed during probe training"));
    }
    let (x, y) = probe_rows(backbone, train, mode)?;
    let pred = probe.predict(&x)?;
    let correct = pred.iter().zip(&y).filter(|(a, b)| a == b).count();
    Ok(ProbeResult {
        probe,
        train_accuracy: correct as f64 / y.len().max(1) as f64,
        backbone_unchanged: unchanged,
    })
}

fn finetune(
    backbone: &Backbone,
    train: &[&MultiModalSample],
    num_classes: usize,
    cfg: &ProbeConfig,
    mode: ExecMode,
) -> Result<LinearProbe> {
    const BATCH: usize = 8;
    let (x0, _) = probe_rows(backbone, train, mode)?;
    let (mean, std) = standardisation(&x0)?;
    let din = x0.dims()[1];
    let mut head_store = ParamStore::new(cfg.seed, DType::F32);
    let w = head_store.param("probe/head/weight", &[din, num_classes], Init::Zeros)?;
    let b = head_store.param("probe/head/bias", &[num_classes], Init::Zeros)?;
    let mut probe = LinearProbe {
        weight: Array2::zeros((din, num_classes)),
        bias: vec![0.0; num_classes],
        mean,
        std,
        head: backbone.assembly.head,
    };
    let mut head_opt = probe_optimizer(cfg, cfg.lr);
    let mut body_opt = probe_optimizer(cfg, cfg.finetune_lr);
    let mut rng = stream_rng(cfg.seed, PROBE_STREAM + 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let grid = backbone.grid();
    for _ in 0..cfg.steps {
        order.shuffle(&mut rng);
        let batch: Vec<&MultiModalSample> = order.iter().take(BATCH).map(|&i| train[i]).collect();
        let feats = backbone.forward(&batch)?;
        let (bs, n_s, d) = feats.dims3()?;
        let mut labels = Vec::new();
        for s in &batch {
            let sites = site_labels(s, grid)?;
            match probe.head {
                HeadKind::PerPixelLinear => labels.extend(sites.into_iter().map(|v| v as u32)),
                HeadKind::LinearClassifier => labels.push(image_label(&sites) as u32),
            }
        }
        let x = match probe.head {
            HeadKind::PerPixelLinear => feats.reshape((bs * n_s, d))?,
            HeadKind::LinearClassifier => feats.mean(1)?,
        };
        let n = labels.len();
        let y = Tensor::from_vec(labels, n, x.device())?;
        let loss = cross_entropy(&probe.logits(&x, &w, &b)?, &y)?;
        let grads = loss.backward()?;
        head_opt.step(&head_store, &grads)?;
        body_opt.step(&backbone.store, &grads)?;
    }
    probe.weight = Array2::from_shape_vec((din, num_classes), w.flatten_all()?.to_vec1::<f32>()?).expect("shape");
    probe.bias = b.to_vec1::<f32>()?;
    Ok(probe)
}

/// One evaluated row of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    /// Site index, or `None` for whole-sample predictions.
    pub site: Option<usize>,
    pub truth: usize,
    pub pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub mean_iou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn from_predictions(num_classes: usize, predictions: Vec<Prediction>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Dataset("empty evaluation split".into()));
        }
        let truth: Vec<usize> = predictions.iter().map(|p| p.truth).collect();
        let pred: Vec<usize> = predictions.iter().map(|p| p.pred).collect();
        let confusion = ConfusionMatrix::from_pairs(num_classes, &truth, &pred)?;
        Ok(EvalReport {
            overall_accuracy: confusion.overall_accuracy().unwrap_or(0.0),
            mean_iou: confusion.mean_iou().unwrap_or(0.0),
            per_class_iou: confusion.iou(),
            confusion,
            predictions,
        })
    }

    /// `class,iou,support` rows followed by summary rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("class,iou,support\n");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let support: u64 = self.confusion.counts[c].iter().sum();
            let iou = iou.map_or(String::from(""), |v| format!("{v:.6}"));
            out.push_str(&format!("{c},{iou},{support}\n"));
        }
        out.push_str(&format!("overall_accuracy,{:.6},{}\n", self.overall_accuracy, self.confusion.total()));
        out.push_str(&format!("mean_iou,{:.6},\n", self.mean_iou));
        out
    }

    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("sample_id,site,truth,pred\n");
        for p in &self.predictions {
            let site = p.site.map_or(String::new(), |s| s.to_string());
            out.push_str(&format!("{},{},{},{}\n", p.sample_id, site, p.truth, p.pred));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(dir.join("predictions.csv"), self.predictions_csv())?;
        let summary = serde_json::json!({
            "overall_accuracy": self.overall_accuracy,
            "mean_iou": self.mean_iou,
            "per_class_iou": self.per_class_iou,
            "confusion": self.confusion.counts,
        });
        std::fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&summary)?)?;
        Ok(())
    }
}

/// Parse a predictions file written by [`EvalReport::write`].
pub fn read_predictions_csv(text: &str) -> Result<Vec<Prediction>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Dataset(format!("bad prediction row `{l}`")));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Dataset(format!("{s}: {e}")));
            Ok(Prediction {
                sample_id: f[0].to_string(),
                site: if f[1].is_empty() { None } else { Some(num(f[1])?) },
                truth: num(f[2])?,
                pred: num(f[3])?,
            })
        })
        .collect()
}

pub fn evaluate(
    probe: &LinearProbe,
    backbone: &Backbone,
    samples: &[&MultiModalSample],
    mode: ExecMode,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("empty evaluation split".into()));
    }
    let (x, y) = probe_rows(backbone, samples, mode)?;
    let pred = probe.predict(&x)?;
    let n_s = backbone.grid() * backbone.grid();
    let predictions = y
        .iter()
        .zip(&pred)
        .enumerate()
        .map(|(i, (&truth, &p))| match probe.head {
            HeadKind::PerPixelLinear => Prediction {
                sample_id: samples[i / n_s].id.clone(),
                site: Some(i % n_s),
                truth,
                pred: p,
            },
            HeadKind::LinearClassifier => Prediction {
                sample_id: samples[i].id.clone(),
                site: None,
                truth,
                pred: p,
            },
        })
        .collect();
    EvalReport::from_predictions(probe.num_classes(), predictions)
}

/// Train on `train`, evaluate on `test`.
pub fn probe_and_evaluate(
    backbone: &Backbone,
    train: &[&MultiModalSample],
    test: &[&MultiModalSample],
    num_classes: usize,
    cfg: &ProbeConfig,
    mode: ExecMode,
) -> Result<EvalReport> {
    let trained = train_probe(backbone, train, num_classes, cfg, mode)?;
    evaluate(&trained.probe, backbone, test, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudRow {
    pub cloud_rate: f64,
    pub oa_with_sar: f64,
    pub oa_without_sar: f64,
}

impl CloudRow {
    pub fn gap(&self) -> f64 {
        self.oa_with_sar - self.oa_without_sar
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudTable {
    pub rows: Vec<CloudRow>,
}

impl CloudTable {
    /// Whether the with/without-SAR gap never shrinks as clouds increase.
    pub fn gap_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].gap() >= w[0].gap())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cloud_rate,oa_with_sar,oa_without_sar,gap\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                r.cloud_rate,
                r.oa_with_sar,
                r.oa_without_sar,
                r.gap()
            ));
        }
        out
    }
}

/// Probe accuracy with and without SAR across datasets of rising cloud
/// cover. `datasets` holds `(cloud_rate, train, test)` triples; each
/// backbone is shared across rates.
pub fn cloud_ablation(
    with_sar: &Backbone,
    without_sar: &Backbone,
    datasets: &[(f64, Vec<&MultiModalSample>, Vec<&MultiModalSample>)],
    num_classes: usize,
    cfg: &ProbeConfig,
    mode: ExecMode,
) -> Result<CloudTable> {
    if !with_sar.assembly.uses(Modality::Sar) || without_sar.assembly.uses(Modality::Sar) {
        return Err(Error::Config("cloud ablation needs one assembly with SAR and one without".into()));
    }
    let mut rows = Vec::with_capacity(datasets.len());
    for (rate, train, test) in datasets {
        let a = probe_and_evaluate(with_sar, train, test, num_classes, cfg, mode)?;
        let b = probe_and_evaluate(without_sar, train, test, num_classes, cfg, mode)?;
        rows.push(CloudRow {
            cloud_rate: *rate,
            oa_with_sar: a.overall_accuracy,
            oa_without_sar: b.overall_accuracy,
        });
    }
    Ok(CloudTable { rows })
}

/// Prototype rasters of `F_fus^mm` for every sample.
pub fn prototype_maps(backbone: &Backbone, bank: &PrototypeBank, samples: &[&MultiModalSample]) -> Result<Vec<PrototypeRaster>> {
    if backbone.bank.is_some() {
        return Err(Error::Config("prototype maps use features before geo-context".into()));
    }
    samples
        .iter()
        .map(|s| {
            let v = backbone.extract_features(s)?;
            render_prototype_map(&s.id, &v, &s.location, bank)
        })
        .collect()
}

/// Agreement between prototype rasters and site labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AriReport {
    /// `region -> (ARI, sites)`.
    pub per_region: BTreeMap<usize, (f64, usize)>,
    /// Site-weighted mean over regions.
    pub mean: f64,
}

/// ARI of prototype ids against labels, computed within each region (the
/// prototype sets are region-specific) and averaged by site count.
pub fn prototype_ari(rasters: &[PrototypeRaster], samples: &[&MultiModalSample]) -> Result<AriReport> {
    if rasters.len() != samples.len() {
        return Err(Error::shape("samples", samples.len(), rasters.len()));
    }
    let mut groups: BTreeMap<usize, (Vec<u32>, Vec<usize>)> = BTreeMap::new();
    for (r, s) in rasters.iter().zip(samples) {
        let labels = site_labels(s, r.ids.nrows())?;
        let g = groups.entry(r.region).or_default();
        g.0.extend(r.ids.iter().copied());
        g.1.extend(labels);
    }
    let mut per_region = BTreeMap::new();
    let (mut acc, mut total) = (0.0, 0usize);
    for (region, (ids, labels)) in groups {
        let ari = adjusted_rand_index(&ids, &labels)?;
        acc += ari * ids.len() as f64;
        total += ids.len();
        per_region.insert(region, (ari, ids.len()));
    }
    if total == 0 {
        return Err(Error::Dataset("no prototype rasters".into()));
    }
    Ok(AriReport {
        per_region,
        mean: acc / total as f64,
    })
}
