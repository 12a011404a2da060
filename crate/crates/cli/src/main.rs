//! `skysense-mini`: generate synthetic data, pre-train, probe and render
//! geo-context prototypes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;
use skysense_core::checkpoint::Checkpoint;
use skysense_core::config::{keys_help, Config};
use skysense_core::data::{load_dataset, Split};
use skysense_core::downstream::{
    bank_from_checkpoint, evaluate, prototype_ari, prototype_maps, train_probe, Backbone, TaskAssembly,
};
use skysense_core::exec::{init_threads_from_env, ExecMode, THREADS_ENV};
use skysense_core::pretrain::pretrain_run;
use skysense_core::synth::{generate_dataset, WorldSpec};
use skysense_core::Error;

const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "skysense-mini", version, about = "Desk-scale multi-modal remote-sensing pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Overrides {
    /// Override the seed of this command (world.seed, train.seed or probe.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Override a scalar config key, e.g. `--set train.steps=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-modal dataset.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Pre-train the backbone; writes metrics.jsonl and checkpoints/.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a probe on the train split and evaluate on the test split.
    /// Model and world settings come from the checkpoint; `probe.*` from --config.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// e.g. `hr,frozen,pixel` or `hr+ms+sar,fusion,geo,frozen,pixel`.
        #[arg(long)]
        assembly: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render the most similar prototype per feature site as PNG rasters.
    VizPrototypes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Probe { .. } => "probe",
            Command::VizPrototypes { .. } => "viz-prototypes",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::GenerateData { out, .. }
            | Command::Pretrain { out, .. }
            | Command::Probe { out, .. }
            | Command::VizPrototypes { out, .. } => out,
        }
    }
}

#[derive(Debug, serde::Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<PathBuf>,
    config_hash: String,
    seed: u64,
    git_describe: String,
    started_at: f64,
    finished_at: Option<f64>,
    out_dir: PathBuf,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Output staged in a sibling temp directory and renamed into place on success.
struct Staging {
    tmp: PathBuf,
    out: PathBuf,
    committed: bool,
}

impl Staging {
    fn begin(out: &Path) -> skysense_core::Result<Self> {
        let name = out
            .file_name()
            .ok_or_else(|| Error::Config(format!("output path {} has no name", out.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Staging {
            tmp,
            out: out.to_path_buf(),
            committed: false,
        })
    }

    fn commit(mut self) -> skysense_core::Result<()> {
        if self.out.exists() {
            fs::remove_dir_all(&self.out)?;
        }
        fs::rename(&self.tmp, &self.out)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

fn load_config(path: &Path, overrides: &Overrides, seed_key: &str) -> skysense_core::Result<Config> {
    let mut set = overrides.set.clone();
    if let Some(seed) = overrides.seed {
        set.push(format!("{seed_key}={seed}"));
    }
    Config::load_with_overrides(Some(path), &set)
}

fn config_from_checkpoint(ck: &Checkpoint, path: &Path) -> skysense_core::Result<Config> {
    let cfg: Config = serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::checkpoint(path, format!("embedded config: {e}")))?;
    Ok(cfg)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> skysense_core::Result<()> {
    fs::write(dir.join(RUN_MANIFEST), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

fn run(command: Command, mode: ExecMode) -> skysense_core::Result<()> {
    let name = command.name().to_string();
    let out = command.out().to_path_buf();
    let (config, config_path, seed) = match &command {
        Command::GenerateData { config, overrides, .. } => {
            let c = load_config(config, overrides, "world.seed")?;
            let s = c.world.seed;
            (c, Some(config.clone()), s)
        }
        Command::Pretrain { config, overrides, .. } => {
            let c = load_config(config, overrides, "train.seed")?;
            let s = c.train.seed;
            (c, Some(config.clone()), s)
        }
        Command::Probe {
            config,
            checkpoint,
            overrides,
            ..
        } => {
            let file = load_config(config, overrides, "probe.seed")?;
            let ck = Checkpoint::read(checkpoint)?;
            let mut c = config_from_checkpoint(&ck, checkpoint)?;
            c.probe = file.probe;
            let s = c.probe.seed;
            (c, Some(config.clone()), s)
        }
        Command::VizPrototypes { checkpoint, .. } => {
            let ck = Checkpoint::read(checkpoint)?;
            let c = config_from_checkpoint(&ck, checkpoint)?;
            let s = c.train.seed;
            (c, None, s)
        }
    };
    let staging = Staging::begin(&out)?;
    if let Command::Pretrain { resume: Some(_), .. } = &command {
        if out.exists() {
            copy_dir(&out, &staging.tmp)?;
        }
    }
    let mut manifest = RunManifest {
        command: name,
        config_path,
        config_hash: config.hash(),
        seed,
        git_describe: git_describe(),
        started_at: now(),
        finished_at: None,
        out_dir: out.clone(),
    };
    write_manifest(&staging.tmp, &manifest)?;
    let dir = staging.tmp.clone();
    match command {
        Command::GenerateData { .. } => {
            let spec = WorldSpec::from_config(config.world.clone())?;
            let m = generate_dataset(&spec, config.data.num_samples, &dir, mode)?;
            fs::write(dir.join("config.toml"), config.to_toml_string())?;
            log::info!("wrote {} samples", m.samples.len());
        }
        Command::Pretrain { data, resume, .. } => {
            let ds = load_dataset(&data, mode)?;
            let samples: Vec<_> = ds.split(Split::Train).into_iter().cloned().collect();
            fs::write(dir.join("config.toml"), config.to_toml_string())?;
            let resume = resume.map(|r| fs::canonicalize(&r).unwrap_or(r));
            let summary = pretrain_run(&config, samples, &dir, resume.as_deref(), mode)?;
            if summary.start_step == summary.end_step {
                log::info!("nothing to do: already at step {}", summary.end_step);
            }
        }
        Command::Probe {
            checkpoint,
            data,
            assembly,
            ..
        } => {
            let assembly = TaskAssembly::parse(&assembly)?;
            let ck = Checkpoint::read(&checkpoint)?;
            let backbone = Backbone::from_checkpoint(&ck, &config, &assembly)?;
            let ds = load_dataset(&data, mode)?;
            let (train, test) = (ds.split(Split::Train), ds.split(Split::Test));
            let n_classes = config.world.num_classes;
            let trained = train_probe(&backbone, &train, n_classes, &config.probe, mode)?;
            let report = evaluate(&trained.probe, &backbone, &test, mode)?;
            report.write(&dir)?;
            trained
                .probe
                .to_checkpoint(&config.hash(), &assembly)?
                .write(&dir.join("probe_checkpoint"))?;
            fs::write(
                dir.join("probe.json"),
                serde_json::to_vec_pretty(&json!({
                    "assembly": assembly.to_string(),
                    "train_accuracy": trained.train_accuracy,
                    "backbone_unchanged": trained.backbone_unchanged,
                }))?,
            )?;
            println!("OA {:.4} mIoU {:.4}", report.overall_accuracy, report.mean_iou);
        }
        Command::VizPrototypes { checkpoint, data, .. } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let bank = bank_from_checkpoint(&ck, &config)?;
            let assembly = TaskAssembly::parse("hr+ms+sar,fusion,frozen,pixel")?;
            let backbone = Backbone::from_checkpoint(&ck, &config, &assembly)?;
            let ds = load_dataset(&data, mode)?;
            let samples: Vec<_> = ds.samples.iter().collect();
            let rasters = prototype_maps(&backbone, &bank, &samples)?;
            let mut legend = serde_json::Map::new();
            for r in &rasters {
                r.write_png(&dir.join(format!("{}.png", r.sample_id)))?;
                legend.insert(r.sample_id.clone(), serde_json::Value::Object(r.legend()));
            }
            fs::write(dir.join("legend.json"), serde_json::to_vec_pretty(&legend)?)?;
            let labelled: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].labels.is_some()).collect();
            if !labelled.is_empty() {
                let rs: Vec<_> = labelled.iter().map(|&i| rasters[i].clone()).collect();
                let ss: Vec<_> = labelled.iter().map(|&i| samples[i]).collect();
                let ari = prototype_ari(&rs, &ss)?;
                fs::write(dir.join("ari.json"), serde_json::to_vec_pretty(&ari)?)?;
                println!("prototype ARI {:.4}", ari.mean);
            }
        }
    }
    manifest.finished_at = Some(now());
    write_manifest(&dir, &manifest)?;
    staging.commit()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = format!("{}\nEnvironment:\n  {THREADS_ENV}  cap on worker threads (default: all cores)\n", keys_help());
    let matches = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|s| s.after_help(help.clone()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let threads = init_threads_from_env();
    log::debug!("{threads} worker threads");
    match run(cli.command, ExecMode::default()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
