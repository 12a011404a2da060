//! Run configuration: one TOML file with a section per concern. Every key
//! has a default, unknown keys are rejected, and scalar keys can be
//! overridden from the command line as `section.key=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Modality, SampleShape};
use crate::encoder::EncoderConfig;
use crate::fusion::FusionConfig;
use crate::synth::WorldConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Samples written by `generate-data`.
    pub num_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { num_samples: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub encoder_depth: usize,
    pub fusion_depth: usize,
    /// Patch side for Ms and SAR; HR uses this times the resolution ratio.
    pub ms_patch: usize,
    pub head_hidden: usize,
    /// Width of the normalised bottleneck before the output layer.
    pub head_bottleneck: usize,
    /// Projection-head output size `K`.
    pub head_out: usize,
    pub align_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            num_heads: 4,
            mlp_ratio: 2,
            encoder_depth: 2,
            fusion_depth: 2,
            ms_patch: 2,
            head_hidden: 128,
            head_bottleneck: 64,
            head_out: 256,
            align_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, modality: Modality, shape: &SampleShape) -> EncoderConfig {
        let (input_size, patch_size) = match modality {
            Modality::Hr => (shape.hr_size, self.ms_patch * shape.resolution_ratio()),
            Modality::Ms | Modality::Sar => (shape.ms_size, self.ms_patch),
        };
        EncoderConfig {
            modality,
            input_size,
            patch_size,
            depth: self.encoder_depth,
            num_heads: self.num_heads,
            width: self.width,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            depth: self.fusion_depth,
            num_heads: self.num_heads,
            width: self.width,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub teacher_momentum: f64,
    /// Checkpoint interval in steps; the final step is always saved.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 500,
            batch_size: 4,
            lr: 5e-4,
            min_lr: 1e-5,
            warmup_steps: 50,
            weight_decay: 0.04,
            grad_clip: 3.0,
            teacher_momentum: 0.99,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
    pub align_temp: f64,
    pub n_clusters: usize,
    pub cluster_sinkhorn_iters: usize,
    pub cluster_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            teacher_temp: 0.04,
            student_temp: 0.1,
            center_momentum: 0.9,
            align_temp: 0.1,
            n_clusters: 8,
            cluster_sinkhorn_iters: 3,
            cluster_epsilon: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Range of the shared global-crop side, as a fraction of the footprint.
    pub global_scale: [f64; 2],
    pub local_scale: [f64; 2],
    pub n_local: usize,
    /// HR side of local crops in pixels; must be a multiple of the HR patch.
    pub local_size: usize,
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub solarize_prob: f64,
    /// Per-view, per-channel additive HR colour offset range.
    pub colour_jitter: f32,
    /// Frames kept per view; 0 keeps the full sequence.
    pub ms_view_len: usize,
    pub sar_view_len: usize,
    /// Maximum absolute date disturbance in days.
    pub date_jitter: u16,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            global_scale: [0.6, 1.0],
            local_scale: [0.25, 0.5],
            n_local: 2,
            local_size: 32,
            flip_prob: 0.5,
            blur_prob: 0.5,
            solarize_prob: 0.2,
            colour_jitter: 0.0,
            ms_view_len: 6,
            sar_view_len: 3,
            date_jitter: 7,
        }
    }
}

impl AugmentConfig {
    /// No cropping, flipping, photometric change, subsampling or jitter.
    pub fn identity() -> Self {
        AugmentConfig {
            global_scale: [1.0, 1.0],
            local_scale: [0.5, 0.5],
            n_local: 0,
            local_size: 32,
            flip_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
            colour_jitter: 0.0,
            ms_view_len: 0,
            sar_view_len: 0,
            date_jitter: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoConfig {
    pub n_prototypes: usize,
    pub momentum: f32,
    pub sinkhorn_iters: usize,
    pub epsilon: f64,
}

impl Default for GeoConfig {
    fn default() -> Self {
        GeoConfig {
            n_prototypes: 8,
            momentum: 0.9,
            sinkhorn_iters: 3,
            epsilon: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Sites per minibatch; 0 uses full batches.
    pub batch_sites: usize,
    /// Backbone learning rate when fine-tuning.
    pub finetune_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            seed: 0,
            steps: 300,
            lr: 1e-2,
            weight_decay: 1e-4,
            batch_sites: 0,
            finetune_lr: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub geo: GeoConfig,
    pub probe: ProbeConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Load `path` (or defaults when `None`) and apply `key=value` overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut value: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    pub fn validate(&self) -> Result<()> {
        let shape = &self.world.shape;
        if shape.ms_size == 0 || shape.hr_size % shape.ms_size != 0 {
            return Err(Error::Config(format!(
                "HR size {} is not a multiple of Ms size {}",
                shape.hr_size, shape.ms_size
            )));
        }
        let encoders: Vec<EncoderConfig> = Modality::ALL.iter().map(|&m| self.model.encoder(m, shape)).collect();
        for e in &encoders {
            e.validate()?;
        }
        crate::encoder::check_aligned(&encoders)?;
        let hr_patch = encoders[0].patch_size;
        if self.augment.n_local > 0 && (self.augment.local_size % hr_patch != 0 || self.augment.local_size == 0) {
            return Err(Error::Config(format!(
                "local crop size {} is not a multiple of HR patch {hr_patch}",
                self.augment.local_size
            )));
        }
        let check_range = |name: &str, r: [f64; 2]| -> Result<()> {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0) {
                return Err(Error::Config(format!("{name} {r:?} must satisfy 0 < lo <= hi <= 1")));
            }
            Ok(())
        };
        check_range("augment.global_scale", self.augment.global_scale)?;
        check_range("augment.local_scale", self.augment.local_scale)?;
        if self.augment.ms_view_len > shape.t_ms || self.augment.sar_view_len > shape.t_sar {
            return Err(Error::Config("view sequence length exceeds the series length".into()));
        }
        if self.loss.alpha < 0.0 || self.loss.beta < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.loss.teacher_temp <= 0.0 || self.loss.student_temp <= 0.0 || self.loss.align_temp <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.teacher_momentum) {
            return Err(Error::Config("train.teacher_momentum must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.geo.momentum) {
            return Err(Error::Config("geo.momentum must lie in [0, 1)".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.loss.n_clusters == 0 || self.geo.n_prototypes == 0 {
            return Err(Error::Config("cluster and prototype counts must be positive".into()));
        }
        if self.world.region_grid.iter().any(|&g| g == 0) {
            return Err(Error::Config("world.region_grid must be positive".into()));
        }
        Ok(())
    }
}

/// One-line description of every configuration key.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("world.seed", "seed of the synthetic world and every sample in it"),
    ("world.num_classes", "number of landcover classes"),
    ("world.region_grid", "geographic region lattice [rows, cols]; one prototype set per cell"),
    ("world.shape.hr_size", "HR image side in pixels"),
    ("world.shape.ms_size", "multispectral and SAR image side in pixels"),
    ("world.shape.t_ms", "multispectral frames per sample"),
    ("world.shape.t_sar", "SAR frames per sample"),
    ("world.cloud_rate", "fraction of multispectral frames hit by cloud blocks"),
    ("world.cloud_block", "side of a square cloud block, in multispectral pixels"),
    ("world.field_grid", "coarse lattice of the landcover field; smaller means larger patches"),
    ("world.hr_noise", "additive HR pixel noise"),
    ("world.illumination_jitter", "per-sample multiplicative illumination range 1 +- jitter"),
    ("world.colour_shift", "per-sample, per-channel additive HR colour offset range +- shift"),
    ("world.ms_noise", "additive multispectral noise"),
    ("world.sar_looks", "equivalent number of looks of the SAR speckle"),
    ("world.min_ms_distance", "minimum multispectral signature distance between classes"),
    ("world.min_sar_distance", "minimum SAR signature distance between classes"),
    ("world.prior_strength", "weight of the regional class prior in the landcover field"),
    ("data.num_samples", "samples written by generate-data"),
    ("model.width", "token width d of every encoder and the fusion module"),
    ("model.num_heads", "attention heads per layer"),
    ("model.mlp_ratio", "hidden width of transformer MLPs as a multiple of d"),
    ("model.encoder_depth", "transformer layers per spatial encoder"),
    ("model.fusion_depth", "transformer layers in the fusion module"),
    ("model.ms_patch", "patch side for Ms and SAR; HR uses it times the resolution ratio"),
    ("model.head_hidden", "hidden width of the projection heads"),
    ("model.head_bottleneck", "width of the L2-normalised bottleneck of the projection heads"),
    ("model.head_out", "projection head output size K"),
    ("model.align_dim", "width of the cross-modal alignment projections"),
    ("train.seed", "seed of parameter init, batch order and augmentation"),
    ("train.steps", "total optimizer steps"),
    ("train.batch_size", "samples per step"),
    ("train.lr", "peak learning rate"),
    ("train.min_lr", "learning rate at the end of the cosine decay"),
    ("train.warmup_steps", "linear warmup steps"),
    ("train.weight_decay", "AdamW weight decay on matrices"),
    ("train.grad_clip", "global gradient-norm clip; 0 disables"),
    ("train.teacher_momentum", "EMA momentum of the teacher"),
    ("train.checkpoint_every", "checkpoint interval in steps; the final step is always saved"),
    ("loss.alpha", "weight of the multi-granularity contrastive loss"),
    ("loss.beta", "weight of the cross-modal alignment loss"),
    ("loss.teacher_temp", "teacher softmax temperature"),
    ("loss.student_temp", "student softmax temperature"),
    ("loss.center_momentum", "EMA momentum of the teacher logit centres"),
    ("loss.align_temp", "InfoNCE temperature of the alignment loss"),
    ("loss.n_clusters", "object clusters per sample"),
    ("loss.cluster_sinkhorn_iters", "Sinkhorn iterations of the object clustering"),
    ("loss.cluster_epsilon", "Sinkhorn temperature of the object clustering"),
    ("augment.global_scale", "range of the shared global-crop side, as a fraction of the footprint"),
    ("augment.local_scale", "range of the local-crop side, as a fraction of the footprint"),
    ("augment.n_local", "HR local crops per sample"),
    ("augment.local_size", "HR side of local crops in pixels; a multiple of the HR patch"),
    ("augment.flip_prob", "probability of each horizontal and vertical flip"),
    ("augment.blur_prob", "probability of Gaussian blur per view"),
    ("augment.solarize_prob", "probability of solarisation per view"),
    ("augment.colour_jitter", "per-view, per-channel additive HR colour offset range"),
    ("augment.ms_view_len", "multispectral frames kept per view; 0 keeps all"),
    ("augment.sar_view_len", "SAR frames kept per view; 0 keeps all"),
    ("augment.date_jitter", "maximum absolute date disturbance in days"),
    ("geo.n_prototypes", "prototypes per region"),
    ("geo.momentum", "EMA momentum of the prototype update"),
    ("geo.sinkhorn_iters", "Sinkhorn iterations of the prototype assignment"),
    ("geo.epsilon", "Sinkhorn temperature of the prototype assignment"),
    ("probe.seed", "seed of probe minibatch order"),
    ("probe.steps", "probe optimizer steps"),
    ("probe.lr", "probe head learning rate"),
    ("probe.weight_decay", "probe head weight decay"),
    ("probe.batch_sites", "rows per probe minibatch; 0 uses the full set"),
    ("probe.finetune_lr", "backbone learning rate when fine-tuning"),
];

/// Leaf keys of `config` in `section.key` form with their TOML values.
pub fn flatten_keys(config: &Config) -> Vec<(String, String)> {
    fn walk(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) {
        for (k, v) in table {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(t) => walk(&key, t, out),
                other => out.push((key, other.to_string())),
            }
        }
    }
    let table: toml::Table = toml::from_str(&config.to_toml_string()).expect("config round-trips");
    let mut out = Vec::new();
    walk("", &table, &mut out);
    out
}

/// Help text listing every key with its default and description.
pub fn keys_help() -> String {
    let defaults: std::collections::BTreeMap<String, String> = flatten_keys(&Config::default()).into_iter().collect();
    let mut out = String::from("Configuration keys (override with --set key=value):\n");
    for (key, doc) in KEY_DOCS {
        let default = defaults.get(*key).map_or("", String::as_str);
        out.push_str(&format!("  {key} = {default}\n      {doc}\n"));
    }
    out
}

/// Markdown table of every key with its default and meaning.
pub fn keys_markdown() -> String {
    let defaults: std::collections::BTreeMap<String, String> = flatten_keys(&Config::default()).into_iter().collect();
    let mut out = String::from(
        "# Configuration keys\n\nEvery key can be set in the TOML file passed with `--config` or overridden with \
         `--set key=value`. Unknown keys are rejected.\n\n| key | default | meaning |\n|---|---|---|\n",
    );
    for (key, doc) in KEY_DOCS {
        let default = defaults.get(*key).map_or("", String::as_str);
        out.push_str(&format!("| `{key}` | `{default}` | {doc} |\n"));
    }
    out
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{assignment}`: `{k}` is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}
