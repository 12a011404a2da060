#![allow(dead_code)]

use skysense_core::config::Config;
use skysense_core::data::MultiModalSample;
use skysense_core::exec::ExecMode;
use skysense_core::synth::{generate_samples, WorldSpec};

/// A very small but complete configuration: 4×4 feature grid, width 16.
pub fn tiny_config() -> Config {
    Config::load_with_overrides(
        None,
        &[
            "world.shape.hr_size=32".into(),
            "world.shape.ms_size=8".into(),
            "world.shape.t_ms=4".into(),
            "world.shape.t_sar=2".into(),
            "world.region_grid=[2, 2]".into(),
            "data.num_samples=10".into(),
            "model.width=16".into(),
            "model.num_heads=2".into(),
            "model.encoder_depth=1".into(),
            "model.fusion_depth=1".into(),
            "model.head_hidden=16".into(),
            "model.head_bottleneck=8".into(),
            "model.head_out=32".into(),
            "model.align_dim=8".into(),
            "train.batch_size=2".into(),
            "train.steps=4".into(),
            "train.warmup_steps=1".into(),
            "train.checkpoint_every=2".into(),
            "loss.n_clusters=3".into(),
            "augment.local_size=16".into(),
            "augment.ms_view_len=3".into(),
            "augment.sar_view_len=1".into(),
            "geo.n_prototypes=3".into(),
            "probe.steps=20".into(),
        ],
    )
    .expect("tiny config is valid")
}

pub fn samples(config: &Config, n: usize) -> Vec<MultiModalSample> {
    let spec = WorldSpec::from_config(config.world.clone()).expect("world");
    generate_samples(&spec, n, ExecMode::Sequential)
}
