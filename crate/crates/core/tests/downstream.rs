mod common;

use common::{samples, tiny_config};
use skysense_core::checkpoint::Checkpoint;
use skysense_core::data::{Modality, MultiModalSample};
use skysense_core::downstream::{
    cloud_ablation, evaluate, image_label, prototype_ari, read_predictions_csv, site_labels, train_probe, Backbone,
    CloudRow, CloudTable, EvalReport, HeadKind, TaskAssembly,
};
use skysense_core::exec::ExecMode;
use skysense_core::geo::PrototypeRaster;
use skysense_core::pretrain::Trainer;
use skysense_core::Error;

fn checkpoint() -> (skysense_core::config::Config, Checkpoint, Vec<MultiModalSample>) {
    let config = tiny_config();
    let s = samples(&config, 10);
    let mut t = Trainer::new(config.clone(), s.clone(), ExecMode::Sequential).unwrap();
    t.train_step().unwrap();
    (config, t.to_checkpoint().unwrap(), s)
}

#[test]
fn assembly_parsing_and_validation() {
    let a = TaskAssembly::parse("hr,frozen,pixel").unwrap();
    assert_eq!(a.modalities, vec![Modality::Hr]);
    assert!(!a.use_fusion && a.freeze_backbone && a.head == HeadKind::PerPixelLinear);
    let b = TaskAssembly::parse("sar+hr+ms,fusion,geo,finetune,fusion-frozen,classifier").unwrap();
    assert_eq!(b.modalities, vec![Modality::Hr, Modality::Ms, Modality::Sar]);
    assert!(b.use_geo_context && !b.freeze_backbone && b.freeze_fusion);
    assert_eq!(TaskAssembly::parse(&b.to_string()).unwrap(), b);
    for bad in ["hr+ms,frozen", "ms", "hr,wings", "", "hr+lidar,fusion"] {
        assert!(matches!(TaskAssembly::parse(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn hr_only_assembly_loads_no_fusion_or_bank() {
    let (config, ck, _) = checkpoint();
    let a = TaskAssembly::parse("hr,frozen,pixel").unwrap();
    let bb = Backbone::from_checkpoint(&ck, &config, &a).unwrap();
    assert!(bb.fusion.is_none() && bb.bank.is_none());
    assert!(bb.encoders[1].is_none() && bb.encoders[2].is_none());
    assert!(bb.store.names().all(|n| n.starts_with("encoder/HR/")));
}

#[test]
fn loaded_encoder_matches_checkpoint_teacher() {
    let (config, ck, _) = checkpoint();
    let a = TaskAssembly::parse("hr,frozen,pixel").unwrap();
    let bb = Backbone::from_checkpoint(&ck, &config, &a).unwrap();
    for (name, var) in bb.store.iter() {
        let (_, values) = ck.get(name).unwrap();
        let got = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(got, values, "{name}");
    }
}

#[test]
fn missing_module_is_reported() {
    let (config, ck, _) = checkpoint();
    let mut partial = Checkpoint::new(ck.step, ck.config_hash.clone(), ck.config.clone());
    for name in ck.names().filter(|n| n.starts_with("encoder/HR/")) {
        let (shape, v) = ck.get(name).unwrap();
        partial.insert(name.clone(), shape.to_vec(), v.to_vec()).unwrap();
    }
    let hr = TaskAssembly::parse("hr,frozen").unwrap();
    assert!(Backbone::from_checkpoint(&partial, &config, &hr).is_ok());
    for text in ["hr+ms+sar,fusion,frozen", "hr,geo,frozen"] {
        let err = Backbone::from_checkpoint(&partial, &config, &TaskAssembly::parse(text).unwrap()).unwrap_err();
        assert!(matches!(err, Error::MissingModule(_)), "{text}: {err}");
        assert_eq!(err.exit_code(), 4);
    }
}

#[test]
fn frozen_probe_keeps_backbone_and_finetune_moves_it() {
    let (config, ck, s) = checkpoint();
    let train: Vec<&MultiModalSample> = s.iter().take(6).collect();
    let frozen = Backbone::from_checkpoint(&ck, &config, &TaskAssembly::parse("hr+ms+sar,fusion,geo,frozen").unwrap()).unwrap();
    let before = frozen.fingerprint().unwrap();
    let r = train_probe(&frozen, &train, config.world.num_classes, &config.probe, ExecMode::Sequential).unwrap();
    assert!(r.backbone_unchanged);
    assert_eq!(frozen.fingerprint().unwrap(), before);

    let mut probe_cfg = config.probe.clone();
    probe_cfg.steps = 3;
    let tuned = Backbone::from_checkpoint(&ck, &config, &TaskAssembly::parse("hr,finetune").unwrap()).unwrap();
    let before = tuned.fingerprint().unwrap();
    let r = train_probe(&tuned, &train, config.world.num_classes, &probe_cfg, ExecMode::Sequential).unwrap();
    assert!(!r.backbone_unchanged);
    assert_ne!(tuned.fingerprint().unwrap(), before);
}

#[test]
fn fusion_only_finetune_leaves_encoders_alone() {
    let (config, ck, s) = checkpoint();
    let train: Vec<&MultiModalSample> = s.iter().take(4).collect();
    let a = TaskAssembly::parse("hr+ms,fusion,frozen,fusion-trainable").unwrap();
    let bb = Backbone::from_checkpoint(&ck, &config, &a).unwrap();
    let enc = bb.store.fingerprint_prefix("encoder/").unwrap();
    let fus = bb.store.fingerprint_prefix("fusion/").unwrap();
    let mut cfg = config.probe.clone();
    cfg.steps = 2;
    train_probe(&bb, &train, config.world.num_classes, &cfg, ExecMode::Sequential).unwrap();
    assert_eq!(bb.store.fingerprint_prefix("encoder/").unwrap(), enc);
    assert_ne!(bb.store.fingerprint_prefix("fusion/").unwrap(), fus);
}

#[test]
fn geo_context_doubles_feature_width() {
    let (config, ck, s) = checkpoint();
    let plain = Backbone::from_checkpoint(&ck, &config, &TaskAssembly::parse("hr+ms+sar,fusion").unwrap()).unwrap();
    let geo = Backbone::from_checkpoint(&ck, &config, &TaskAssembly::parse("hr+ms+sar,fusion,geo").unwrap()).unwrap();
    let a = plain.extract_features(&s[0]).unwrap();
    let b = geo.extract_features(&s[0]).unwrap();
    let d = config.model.width;
    assert_eq!(a.data().dims(), &[16, 1, d]);
    assert_eq!(b.data().dims(), &[16, 1, 2 * d]);
    let left = b.data().narrow(2, 0, d).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(left, a.data().flatten_all().unwrap().to_vec1::<f32>().unwrap());
}

#[test]
fn report_accuracy_recomputes_from_predictions() {
    let (config, ck, s) = checkpoint();
    let (train, test): (Vec<&MultiModalSample>, Vec<&MultiModalSample>) = (s.iter().take(6).collect(), s.iter().skip(6).collect());
    let bb = Backbone::from_checkpoint(&ck, &config, &TaskAssembly::parse("hr,frozen").unwrap()).unwrap();
    let r = train_probe(&bb, &train, config.world.num_classes, &config.probe, ExecMode::Sequential).unwrap();
    let report = evaluate(&r.probe, &bb, &test, ExecMode::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();
    let preds = read_predictions_csv(&std::fs::read_to_string(dir.path().join("predictions.csv")).unwrap()).unwrap();
    assert_eq!(preds.len(), test.len() * 16);
    let oa = preds.iter().filter(|p| p.truth == p.pred).count() as f64 / preds.len() as f64;
    assert_eq!(oa, report.overall_accuracy);
    let seq = evaluate(&r.probe, &bb, &test, ExecMode::Sequential).unwrap();
    assert_eq!(seq, report);
    assert!(matches!(evaluate(&r.probe, &bb, &[], ExecMode::Sequential), Err(Error::Dataset(_))));
    assert!(matches!(EvalReport::from_predictions(3, Vec::new()), Err(Error::Dataset(_))));
}

#[test]
fn classifier_head_predicts_one_label_per_sample() {
    let (config, ck, s) = checkpoint();
    let refs: Vec<&MultiModalSample> = s.iter().collect();
    let bb = Backbone::from_checkpoint(&ck, &config, &TaskAssembly::parse("hr,frozen,classifier").unwrap()).unwrap();
    let r = train_probe(&bb, &refs, config.world.num_classes, &config.probe, ExecMode::Sequential).unwrap();
    let report = evaluate(&r.probe, &bb, &refs, ExecMode::Sequential).unwrap();
    assert_eq!(report.predictions.len(), refs.len());
    for (p, smp) in report.predictions.iter().zip(&refs) {
        assert_eq!(p.truth, image_label(&site_labels(smp, 4).unwrap()));
    }
}

#[test]
fn cloud_table_gap_and_ablation_contract() {
    let table = CloudTable {
        rows: vec![
            CloudRow { cloud_rate: 0.0, oa_with_sar: 0.8, oa_without_sar: 0.79 },
            CloudRow { cloud_rate: 1.0, oa_with_sar: 0.7, oa_without_sar: 0.5 },
        ],
    };
    assert!(table.gap_monotone());
    assert!(table.to_csv().starts_with("cloud_rate,oa_with_sar,oa_without_sar,gap\n"));
    let (config, ck, _) = checkpoint();
    let a = Backbone::from_checkpoint(&ck, &config, &TaskAssembly::parse("hr+ms,fusion").unwrap()).unwrap();
    let b = Backbone::from_checkpoint(&ck, &config, &TaskAssembly::parse("hr+ms,fusion").unwrap()).unwrap();
    assert!(cloud_ablation(&a, &b, &[], 6, &config.probe, ExecMode::Sequential).is_err());
}

#[test]
fn ari_of_label_raster_is_one() {
    let (_, _, s) = checkpoint();
    let refs: Vec<&MultiModalSample> = s.iter().take(4).collect();
    let rasters: Vec<PrototypeRaster> = refs
        .iter()
        .map(|smp| {
            let labels = site_labels(smp, 4).unwrap();
            PrototypeRaster {
                sample_id: smp.id.clone(),
                region: 0,
                ids: ndarray::Array2::from_shape_fn((4, 4), |(y, x)| labels[y * 4 + x] as u32 + 100),
            }
        })
        .collect();
    let r = prototype_ari(&rasters, &refs).unwrap();
    assert!((r.mean - 1.0).abs() < 1e-12, "{r:?}");
}
