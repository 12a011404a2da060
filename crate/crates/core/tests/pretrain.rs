mod common;

use candle_core::DType;
use common::{samples, tiny_config};
use skysense_core::checkpoint::{list_checkpoints, Checkpoint};
use skysense_core::exec::ExecMode;
use skysense_core::pretrain::{compute_loss, pretrain_run, read_metrics, Trainer, CHECKPOINT_DIR, METRICS_FILE};

fn scalar(t: &candle_core::Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn trainer(overrides: &[&str], dtype: DType) -> Trainer {
    let mut config = tiny_config();
    if !overrides.is_empty() {
        let mut table: toml::Table = toml::from_str(&config.to_toml_string()).unwrap();
        for o in overrides {
            skysense_core::config::apply_override(&mut table, o).unwrap();
        }
        config = toml::Value::Table(table).try_into().unwrap();
    }
    let s = samples(&config, 8);
    Trainer::with_dtype(config, s, ExecMode::Sequential, dtype).unwrap()
}

#[test]
fn total_is_weighted_sum_of_parts() {
    let t = trainer(&["loss.alpha=0.7", "loss.beta=0.3"], DType::F64);
    let batch = t.augmented_batch(0);
    let b = compute_loss(&t.pair, &t.centers, &batch, &t.loss_settings(), ExecMode::Sequential).unwrap();
    let (m, a) = (scalar(&b.mgcl), scalar(&b.align));
    assert_eq!(scalar(&b.total), m * 0.7 + a * 0.3);
    let mut sum = None::<f64>;
    for term in &b.terms {
        let s = (scalar(&term.pixel) + scalar(&term.object)) + scalar(&term.image);
        sum = Some(sum.map_or(s, |acc| acc + s));
    }
    assert_eq!(m, sum.unwrap());
    assert_eq!(b.terms.len(), 4);
    assert!(a > 0.0);
}

#[test]
fn teacher_receives_no_gradient() {
    let t = trainer(&[], DType::F32);
    let batch = t.augmented_batch(0);
    let b = compute_loss(&t.pair, &t.centers, &batch, &t.loss_settings(), ExecMode::Sequential).unwrap();
    let grads = b.total.backward().unwrap();
    for (name, var) in t.pair.teacher_store.iter() {
        assert!(grads.get(var.as_tensor()).is_none(), "teacher parameter {name} has a gradient");
    }
    let with_grad = t.pair.student_store.iter().filter(|(_, v)| grads.get(v.as_tensor()).is_some()).count();
    assert!(with_grad > 0);
}

#[test]
fn unit_teacher_momentum_freezes_teacher() {
    let mut t = trainer(&["train.teacher_momentum=1.0"], DType::F32);
    let before = t.pair.teacher_store.fingerprint().unwrap();
    let student_before = t.pair.student_store.fingerprint().unwrap();
    t.train_step().unwrap();
    assert_eq!(t.pair.teacher_store.fingerprint().unwrap(), before);
    assert_ne!(t.pair.student_store.fingerprint().unwrap(), student_before);
}

#[test]
fn zero_loss_weights_leave_student_unchanged() {
    let mut t = trainer(&["loss.alpha=0.0", "loss.beta=0.0"], DType::F32);
    let before = t.pair.student_store.fingerprint().unwrap();
    let r = t.train_step().unwrap();
    assert_eq!(r.loss["total"], 0.0);
    assert_eq!(t.pair.student_store.fingerprint().unwrap(), before);
}

#[test]
fn same_seed_runs_are_identical() {
    let mut a = trainer(&[], DType::F32);
    let mut b = trainer(&[], DType::F32);
    for _ in 0..2 {
        assert_eq!(a.train_step().unwrap().without_timing(), b.train_step().unwrap().without_timing());
    }
    assert_eq!(
        a.pair.student_store.fingerprint().unwrap(),
        b.pair.student_store.fingerprint().unwrap()
    );
}

#[test]
fn parallel_and_sequential_steps_agree() {
    let config = tiny_config();
    let s = samples(&config, 8);
    let mut a = Trainer::new(config.clone(), s.clone(), ExecMode::Sequential).unwrap();
    let mut b = Trainer::new(config, s, ExecMode::Parallel).unwrap();
    assert_eq!(a.train_step().unwrap().without_timing(), b.train_step().unwrap().without_timing());
}

#[test]
fn resume_matches_straight_run_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut straight = trainer(&[], DType::F32);
    let mut straight_records = Vec::new();
    for _ in 0..4 {
        straight_records.push(straight.train_step().unwrap().without_timing());
    }

    let mut first = trainer(&[], DType::F32);
    first.train_step().unwrap();
    first.train_step().unwrap();
    let path = dir.path().join("ck");
    first.to_checkpoint().unwrap().write(&path).unwrap();
    drop(first);

    let mut resumed = trainer(&[], DType::F32);
    let ck = Checkpoint::read(&path).unwrap();
    resumed.restore(&ck, &path).unwrap();
    assert_eq!(resumed.step, 2);
    for expect in &straight_records[2..] {
        assert_eq!(&resumed.train_step().unwrap().without_timing(), expect);
    }
    for store in ["student", "teacher"] {
        let (a, b) = match store {
            "student" => (&straight.pair.student_store, &resumed.pair.student_store),
            _ => (&straight.pair.teacher_store, &resumed.pair.teacher_store),
        };
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap(), "{store} differs");
    }
    assert_eq!(straight.bank.prototypes(), resumed.bank.prototypes());
    assert_eq!(straight.centers, resumed.centers);
}

#[test]
fn restore_rejects_other_config() {
    let dir = tempfile::tempdir().unwrap();
    let t = trainer(&[], DType::F32);
    let path = dir.path().join("ck");
    t.to_checkpoint().unwrap().write(&path).unwrap();
    let mut other = trainer(&["loss.alpha=0.5"], DType::F32);
    let err = other.restore(&Checkpoint::read(&path).unwrap(), &path).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn run_writes_one_metrics_line_per_step_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let s = samples(&config, 8);
    let out = dir.path().join("run");
    let summary = pretrain_run(&config, s.clone(), &out, None, ExecMode::Sequential).unwrap();
    assert_eq!(summary.end_step, 4);
    let records = read_metrics(&out.join(METRICS_FILE)).unwrap();
    assert_eq!(records.len(), 4);
    let steps: Vec<u64> = list_checkpoints(&out.join(CHECKPOINT_DIR)).unwrap().iter().map(|c| c.0).collect();
    assert_eq!(steps, vec![2, 4]);

    let final_ck = summary.final_checkpoint.unwrap();
    let again = pretrain_run(&config, s.clone(), &out, Some(&final_ck), ExecMode::Sequential).unwrap();
    assert_eq!(again.start_step, again.end_step);
    assert_eq!(read_metrics(&out.join(METRICS_FILE)).unwrap().len(), 4);

    // Resuming from the midpoint rewrites the tail of the log identically.
    let mid = out.join(CHECKPOINT_DIR).join("step-000002");
    pretrain_run(&config, s, &out, Some(&mid), ExecMode::Sequential).unwrap();
    let resumed = read_metrics(&out.join(METRICS_FILE)).unwrap();
    assert_eq!(resumed.len(), 4);
    for (a, b) in records.iter().zip(&resumed) {
        assert_eq!(a.without_timing(), b.without_timing());
    }
}
