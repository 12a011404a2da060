use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentedSample};
use super::loss::{
    loss_align, loss_image, loss_object, loss_pixel_logits, pool_image, Centers, ClContext, FgclTerms, ObjectParams,
    Temperatures, TermOutput,
};
use super::model::{stack_hr, Features, Source, TeacherStudentPair, ViewBatch};
use crate::checkpoint::{list_checkpoints, step_dir, Checkpoint};
use crate::config::Config;
use crate::data::{Modality, MultiModalSample};
use crate::exec::{map_range, ExecMode};
use crate::geo::{cosine_similarity, sinkhorn_assign, PrototypeBank, RegionIndex};
use crate::nn::{tensor_to_array2, AdamW, AdamWConfig, LrSchedule, ParamStore};
use crate::synth::stream_rng;
use crate::{Error, Result};

const EPOCH_STREAM: u64 = 0xE90C_0000_0000;
const AUGMENT_STREAM: u64 = 0xA06_0000_0000_0000;
const BANK_STREAM: u64 = 0xBA_4C00;

pub const GRANULARITIES: [&str; 3] = ["pix", "obj", "img"];

/// Everything the loss needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub alpha: f64,
    pub beta: f64,
    pub temps: Temperatures,
    pub align_temp: f64,
    pub object: ObjectParams,
}

impl LossSettings {
    pub fn from_config(config: &Config) -> Self {
        let l = &config.loss;
        LossSettings {
            alpha: l.alpha,
            beta: l.beta,
            temps: Temperatures {
                student: l.student_temp,
                teacher: l.teacher_temp,
            },
            align_temp: l.align_temp,
            object: ObjectParams {
                n_clusters: l.n_clusters,
                n_iters: l.cluster_sinkhorn_iters,
                epsilon: l.cluster_epsilon,
            },
        }
    }
}

/// Loss graph of one step.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub mgcl: Tensor,
    pub align: Tensor,
    /// Granularity terms per source, in [`Source::ALL`] order.
    pub terms: Vec<FgclTerms>,
    /// Teacher logits per centre key, for the centring update.
    pub teacher_logits: BTreeMap<String, Vec<Tensor>>,
    /// Detached student `F_fus^mm` of the u views, `[B, N_S, d]`.
    pub student_fused_u: Tensor,
    pub empty_overlaps: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossBreakdown {
    /// Named scalar components: `<source>/<granularity>`, `mgcl`, `align`, `total`.
    pub fn components(&self) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for (s, t) in Source::ALL.iter().zip(&self.terms) {
            out.insert(format!("{}/pix", s.key()), scalar(&t.pixel)?);
            out.insert(format!("{}/obj", s.key()), scalar(&t.object)?);
            out.insert(format!("{}/img", s.key()), scalar(&t.image)?);
        }
        out.insert("mgcl".into(), scalar(&self.mgcl)?);
        out.insert("align".into(), scalar(&self.align)?);
        out.insert("total".into(), scalar(&self.total)?);
        Ok(out)
    }
}

fn center_key(s: Source, g: &str) -> String {
    format!("{}/{}", s.key(), g)
}

fn mean2(a: &TermOutput, b: &TermOutput) -> Result<Tensor> {
    Ok(((&a.loss + &b.loss)? * 0.5)?)
}

/// Build the full objective for a batch of augmented samples.
pub fn compute_loss(
    pair: &TeacherStudentPair,
    centers: &Centers,
    batch: &[AugmentedSample],
    settings: &LossSettings,
    mode: ExecMode,
) -> Result<LossBreakdown> {
    let b = batch.len();
    let device = Device::Cpu;
    let dtype = pair.student_store.dtype();
    let views: Vec<_> = batch.iter().map(|a| &a.u).chain(batch.iter().map(|a| &a.v)).collect();
    let vb = ViewBatch::from_views(&views, &device)?;
    let sf: Features = pair.student.forward(&vb)?;
    let tf: Features = pair.teacher.forward(&vb)?.detach();

    let pairs_uv: Vec<&[(usize, usize)]> = batch.iter().map(|a| a.correspondence.pairs.as_slice()).collect();
    let reversed: Vec<_> = batch.iter().map(|a| a.correspondence.reversed()).collect();
    let pairs_vu: Vec<&[(usize, usize)]> = reversed.iter().map(|c| c.pairs.as_slice()).collect();

    let n_local = batch.first().map_or(0, |a| a.locals.len());
    let locals = if n_local > 0 {
        let imgs: Vec<_> = (0..n_local).flat_map(|l| batch.iter().map(move |a| &a.locals[l].0)).collect();
        let x = stack_hr(&imgs, &device)?;
        Some(pair.student.encode(Modality::Hr, &x)?)
    } else {
        None
    };


    let mut terms = Vec::with_capacity(4);
    let mut teacher_logits: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    let mut empty = 0;
    for src in Source::ALL {
        let xs = sf.source(src)?;
        let xt = tf.source(src)?;
        let d = xs.dims()[3];
        let sh = pair.student.head(src);
        let th = pair.teacher.head(src);
        let k = sh.d_out(d);
        let center = |g: &str| centers.get(&center_key(src, g), k, dtype, &device);
        let (cp, co, ci) = (center("pix")?, center("obj")?, center("img")?);
        let (su, sv) = (xs.narrow(0, 0, b)?, xs.narrow(0, b, b)?);
        let (tu, tv) = (xt.narrow(0, 0, b)?, xt.narrow(0, b, b)?);

        let ls = sh.forward(&xs)?;
        let lt = th.forward(&xt)?.detach();
        let (lsu, lsv) = (ls.narrow(0, 0, b)?, ls.narrow(0, b, b)?);
        let (ltu, ltv) = (lt.narrow(0, 0, b)?, lt.narrow(0, b, b)?);
        let p1 = loss_pixel_logits(&lsu, &ltv, &pairs_uv, &cp, settings.temps)?;
        let p2 = loss_pixel_logits(&lsv, &ltu, &pairs_vu, &cp, settings.temps)?;
        empty += p1.empty;
        let pixel = mean2(&p1, &p2)?;
        let dims = lt.dims().to_vec();
        teacher_logits
            .entry(center_key(src, "pix"))
            .or_default()
            .push(lt.reshape((dims[0] * dims[1] * dims[2], dims[3]))?);

        let octx = ClContext {
            student_head: sh,
            teacher_head: th,
            center: &co,
            temps: settings.temps,
        };
        let o1 = loss_object(&octx, &su, &tv, &pairs_uv, settings.object, mode)?;
        let o2 = loss_object(&octx, &sv, &tu, &pairs_vu, settings.object, mode)?;
        let object = mean2(&o1, &o2)?;
        let oentry = teacher_logits.entry(center_key(src, "obj")).or_default();
        oentry.push(o1.teacher_logits);
        oentry.push(o2.teacher_logits);

        let ictx = ClContext {
            center: &ci,
            ..octx
        };
        let mut img_terms = vec![loss_image(&ictx, &su, &tv)?, loss_image(&ictx, &sv, &tu)?];
        if let (Source::Hr, Some(loc)) = (src, &locals) {
            for l in 0..n_local {
                let sl = loc.narrow(0, l * b, b)?;
                img_terms.push(loss_image(&ictx, &sl, &tu)?);
                img_terms.push(loss_image(&ictx, &sl, &tv)?);
            }
        }
        let n_img = img_terms.len();
        let mut image = img_terms[0].loss.clone();
        for t in &img_terms[1..] {
            image = (image + &t.loss)?;
        }
        let image = (image / n_img as f64)?;
        let ientry = teacher_logits.entry(center_key(src, "img")).or_default();
        for t in img_terms.into_iter().take(2) {
            ientry.push(t.teacher_logits);
        }
        terms.push(FgclTerms { pixel, object, image });
    }
    let mgcl = super::loss::loss_mgcl(&terms)?;

    let align = match &pair.student.align {
        Some(proj) => {
            let pooled = [
                pool_image(&sf.per_modality[0].narrow(0, 0, b)?)?,
                pool_image(&sf.per_modality[1].narrow(0, 0, b)?)?,
                pool_image(&sf.per_modality[2].narrow(0, 0, b)?)?,
            ];
            loss_align(&pooled, proj, settings.align_temp)?
        }
        None => Tensor::zeros((), dtype, &device)?,
    };
    let total = ((&mgcl * settings.alpha)? + (&align * settings.beta)?)?;
    Ok(LossBreakdown {
        total,
        mgcl,
        align,
        terms,
        teacher_logits,
        student_fused_u: sf.fused.narrow(0, 0, b)?.detach(),
        empty_overlaps: empty,
    })
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: BTreeMap<String, f64>,
    pub alpha: f64,
    pub beta: f64,
    pub sinkhorn_row_residual: f64,
    pub sinkhorn_col_residual: f64,
    pub empty_overlaps: usize,
    pub elapsed_ms: f64,
}

impl StepRecord {
    /// The record without wall-clock fields, for determinism comparisons.
    pub fn without_timing(&self) -> StepRecord {
        StepRecord {
            elapsed_ms: 0.0,
            ..self.clone()
        }
    }
}

/// Mutable pre-training state, owned by one process.
#[derive(Debug)]
pub struct Trainer {
    pub config: Config,
    pub pair: TeacherStudentPair,
    pub optimizer: AdamW,
    pub centers: Centers,
    pub bank: PrototypeBank,
    pub step: u64,
    pub mode: ExecMode,
    samples: Vec<MultiModalSample>,
}

fn optimizer_for(config: &Config) -> AdamW {
    let t = &config.train;
    AdamW::new(
        AdamWConfig {
            weight_decay: t.weight_decay,
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            ..Default::default()
        },
        LrSchedule {
            base_lr: t.lr,
            min_lr: t.min_lr,
            warmup_steps: t.warmup_steps,
            total_steps: t.steps,
        },
    )
}

impl Trainer {
    pub fn new(config: Config, samples: Vec<MultiModalSample>, mode: ExecMode) -> Result<Self> {
        Self::with_dtype(config, samples, mode, DType::F32)
    }

    pub fn with_dtype(config: Config, samples: Vec<MultiModalSample>, mode: ExecMode, dtype: DType) -> Result<Self> {
        config.validate()?;
        if samples.len() < config.train.batch_size {
            return Err(Error::Dataset(format!(
                "{} training samples is fewer than the batch size {}",
                samples.len(),
                config.train.batch_size
            )));
        }
        let pair = TeacherStudentPair::new(&config, dtype)?;
        let grid = RegionIndex::new(config.world.region_grid[0], config.world.region_grid[1]);
        let mut rng = stream_rng(config.train.seed, BANK_STREAM);
        let bank = PrototypeBank::new_random(grid, config.geo.n_prototypes, config.model.width, config.geo.momentum, &mut rng)?;
        Ok(Trainer {
            optimizer: optimizer_for(&config),
            centers: Centers::new(config.loss.center_momentum),
            pair,
            bank,
            step: 0,
            mode,
            samples,
            config,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.samples.len() / self.config.train.batch_size) as u64
    }

    /// Sample indices of `step`: consecutive slices of a per-epoch permutation.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let pos = (step % spe) as usize;
        let mut perm: Vec<usize> = (0..self.samples.len()).collect();
        perm.shuffle(&mut stream_rng(self.config.train.seed, EPOCH_STREAM + epoch));
        let bs = self.config.train.batch_size;
        perm[pos * bs..(pos + 1) * bs].to_vec()
    }

    /// Augmented batch of `step`; each sample draws from its own stream.
    pub fn augmented_batch(&self, step: u64) -> Vec<AugmentedSample> {
        let idx = self.batch_indices(step);
        let grid = self.config.model.encoder(Modality::Ms, &self.config.world.shape).grid();
        let cfg = &self.config.augment;
        let seed = self.config.train.seed;
        map_range(self.mode, idx.len(), |slot| {
            let mut rng = stream_rng(seed, AUGMENT_STREAM + (step << 8) + slot as u64);
            augment(&self.samples[idx[slot]], cfg, grid, &mut rng)
        })
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings::from_config(&self.config)
    }

    /// Forward, backward, optimizer, teacher EMA, centring and prototype updates.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.step;
        let batch = self.augmented_batch(step);
        let idx = self.batch_indices(step);
        let settings = self.loss_settings();
        let breakdown = compute_loss(&self.pair, &self.centers, &batch, &settings, self.mode)?;
        let components = breakdown.components()?;
        if let Some((name, _)) = components.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: name.clone(),
                step,
            });
        }
        let grads = breakdown.total.backward()?;
        let stats = self.optimizer.step(&self.pair.student_store, &grads).map_err(|e| match e {
            Error::NonFinite { component, .. } => Error::NonFinite { component, step },
            other => other,
        })?;
        self.pair.update_teacher()?;
        for (key, logits) in &breakdown.teacher_logits {
            let refs: Vec<&Tensor> = logits.iter().collect();
            self.centers.update(key, &refs)?;
        }
        let (mut row_res, mut col_res) = (0.0f64, 0.0f64);
        let geo = &self.config.geo;
        for (slot, &i) in idx.iter().enumerate() {
            let feats = tensor_to_array2(&breakdown.student_fused_u.get(slot)?)?;
            let region = self.bank.region_for(&self.samples[i].location);
            let sim = cosine_similarity(feats.view(), self.bank.region(region))?;
            let a = sinkhorn_assign(sim.view(), geo.sinkhorn_iters, geo.epsilon)?;
            row_res = row_res.max(a.row_residual);
            col_res = col_res.max(a.col_residual);
            self.bank.update(region, &a.plan, feats.view())?;
        }
        self.step += 1;
        Ok(StepRecord {
            step,
            epoch: step / self.steps_per_epoch(),
            lr: stats.lr,
            grad_norm: stats.grad_norm,
            loss: components,
            alpha: settings.alpha,
            beta: settings.beta,
            sinkhorn_row_residual: row_res,
            sinkhorn_col_residual: col_res,
            empty_overlaps: breakdown.empty_overlaps,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config_json = serde_json::to_value(&self.config)?;
        let mut ck = Checkpoint::new(self.step, self.config.hash(), config_json);
        for (name, shape, values) in self.pair.teacher_store.export()? {
            ck.insert(name, shape, values)?;
        }
        for (name, shape, values) in self.pair.student_store.export()? {
            ck.insert(format!("student/{name}"), shape, values)?;
        }
        for (key, values) in self.optimizer.export_state() {
            let n = values.len();
            ck.insert(format!("optim/{key}"), vec![n], values)?;
        }
        for (key, values) in self.centers.export() {
            let n = values.len();
            ck.insert(format!("center/{key}"), vec![n], values)?;
        }
        let p = self.bank.prototypes();
        ck.insert("geo/prototypes", p.shape().to_vec(), p.iter().copied().collect())?;
        let grid = self.bank.grid();
        ck.meta.insert("region_grid".into(), serde_json::json!([grid.rows, grid.cols]));
        ck.meta.insert("prototype_momentum".into(), serde_json::json!(self.bank.momentum()));
        ck.meta.insert("optimizer_step".into(), serde_json::json!(self.optimizer.steps()));
        Ok(ck)
    }

    /// Restore every piece of state from `ck`; the config hash must match.
    pub fn restore(&mut self, ck: &Checkpoint, path: &Path) -> Result<()> {
        if ck.config_hash != self.config.hash() {
            return Err(Error::checkpoint(path, "config hash differs from the current configuration"));
        }
        let load = |store: &ParamStore, prefix: &str| -> Result<()> {
            for name in store.names() {
                let key = format!("{prefix}{name}");
                let (shape, values) = ck
                    .get(&key)
                    .ok_or_else(|| Error::checkpoint(path, format!("missing entry `{key}`")))?;
                let t = Tensor::from_vec(values.to_vec(), shape, store.device())?;
                store.set(name, &t).map_err(|e| Error::checkpoint(path, e.to_string()))?;
            }
            Ok(())
        };
        load(&self.pair.teacher_store, "")?;
        load(&self.pair.student_store, "student/")?;
        let opt_step = ck
            .meta
            .get("optimizer_step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::checkpoint(path, "missing optimizer step"))?;
        self.optimizer
            .import_state(opt_step, ck.with_prefix("optim/").map(|(k, _, v)| (k.to_string(), v.to_vec())))?;
        self.centers
            .import(ck.with_prefix("center/").map(|(k, _, v)| (k.to_string(), v.to_vec())));
        let (shape, values) = ck
            .get("geo/prototypes")
            .ok_or_else(|| Error::checkpoint(path, "missing entry `geo/prototypes`"))?;
        if shape != self.bank.prototypes().shape() {
            return Err(Error::checkpoint(path, "prototype bank shape differs"));
        }
        let arr = ndarray::Array3::from_shape_vec((shape[0], shape[1], shape[2]), values.to_vec())
            .expect("checked shape");
        self.bank = PrototypeBank::from_array(self.bank.grid(), arr, self.bank.momentum())?;
        self.step = ck.step;
        Ok(())
    }
}

/// Outcome of [`pretrain_run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub start_step: u64,
    pub end_step: u64,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub metrics_path: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Train to `config.train.steps`, writing `metrics.jsonl` and checkpoints
/// under `out`. With `resume`, state is restored from that checkpoint first.
pub fn pretrain_run(
    config: &Config,
    samples: Vec<MultiModalSample>,
    out: &Path,
    resume: Option<&Path>,
    mode: ExecMode,
) -> Result<RunSummary> {
    let mut trainer = Trainer::new(config.clone(), samples, mode)?;
    if let Some(path) = resume {
        let ck = Checkpoint::read(path)?;
        trainer.restore(&ck, path)?;
    }
    fs::create_dir_all(out)?;
    let metrics_path = out.join(METRICS_FILE);
    let start_step = trainer.step;
    let total = config.train.steps;
    let mut records = Vec::new();
    let mut final_checkpoint = None;
    if start_step >= total {
        return Ok(RunSummary {
            start_step,
            end_step: start_step,
            records,
            final_checkpoint: resume.map(Path::to_path_buf),
            metrics_path,
        });
    }
    if metrics_path.exists() {
        // Drop lines past the restored step so a resumed log has one line per step.
        let kept: Vec<String> = read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.step < start_step)
            .map(|r| serde_json::to_string(&r))
            .collect::<std::result::Result<_, _>>()?;
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&metrics_path, text)?;
    } else if start_step > 0 {
        log::warn!("resuming at step {start_step} without an existing metrics log");
    }
    let mut metrics = fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    let ck_root = out.join(CHECKPOINT_DIR);
    while trainer.step < total {
        let record = trainer.train_step()?;
        writeln!(metrics, "{}", serde_json::to_string(&record)?)?;
        metrics.flush()?;
        log::info!("step {} loss {:.5}", record.step, record.loss["total"]);
        records.push(record);
        let done = trainer.step;
        let every = config.train.checkpoint_every;
        if done == total || (every > 0 && done % every == 0) {
            let dir = step_dir(&ck_root, done);
            trainer.to_checkpoint()?.write(&dir)?;
            final_checkpoint = Some(dir);
        }
    }
    Ok(RunSummary {
        start_step,
        end_step: trainer.step,
        records,
        final_checkpoint,
        metrics_path,
    })
}

/// Latest checkpoint under a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    Ok(list_checkpoints(&run_dir.join(CHECKPOINT_DIR))?.pop().map(|(_, p)| p))
}

/// Parse a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
