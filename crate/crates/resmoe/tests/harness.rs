//! Config parsing, checkpoint persistence and the training-loop contracts:
//! sanity convergence, zero aux loss for NONE, bit-for-bit resume, NaN
//! abort, and deterministic exports.

use resmoe::checkpoint::{config_hash, Checkpoint};
use resmoe::config::{ConstraintChoice, Precision, RunConfig};
use resmoe::data::{load_datasets, synthetic_clustered_dataset};
use resmoe::report;
use resmoe::sweep::mean_and_sample_std;
use resmoe::train::{evaluate, train};
use resmoe::Error;
use resmoe_core::model::Model;
use resmoe_core::moe::EvalMode;

/// Tiny config used throughout: 2 domains x 1 class, single expert.
fn tiny_cfg() -> RunConfig {
    let mut cfg = RunConfig::desk_preset();
    cfg.model.num_classes = 2;
    cfg.data.num_domains = 2;
    cfg.data.classes_per_domain = 1;
    cfg.data.samples_per_class = 16;
    cfg.data.eval_samples_per_class = 8;
    let moe = cfg.model.moe.as_mut().unwrap();
    moe.num_experts = 1;
    moe.k = 1;
    cfg.train.epochs = 5;
    cfg.train.batch_size = 8;
    cfg.train.precision = Precision::F64;
    cfg
}

#[test]
fn toml_round_trip_and_validation() {
    let cfg = RunConfig::desk_preset();
    let text = cfg.to_toml();
    let parsed = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, parsed);

    assert!(RunConfig::from_toml("nonsense = true").is_err());
    // synthetic class count must match the model
    let bad = text.replace("num_classes = 12", "num_classes = 13");
    assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
    // dotted-key form parses to the same config
    let dotted = "\
model.num_classes = 12\n\
model.width_divisor = 8\n\
model.input_resolution = 16\n\
model.moe.position = 3\n\
model.moe.expert_ratio = 0.5\n\
data.source = \"synthetic\"\n\
optim.lr = 3e-3\n\
train.epochs = 12\n\
train.batch_size = 32\n";
    let parsed = RunConfig::from_toml(dotted).unwrap();
    assert_eq!(parsed, RunConfig::desk_preset());
}

#[test]
fn one_expert_model_learns_separable_task() {
    let cfg = tiny_cfg();
    let (train_ds, eval_ds) = load_datasets(&cfg).unwrap();
    let outcome = train::<f64>(&cfg, &train_ds, None).unwrap();
    // NONE constraint -> aux loss is exactly zero everywhere
    assert!(outcome.log.iter().all(|m| m.aux_loss == 0.0));
    let (mut model, _, _) = outcome.checkpoint.restore::<f64>(&cfg).unwrap();
    let eval = evaluate(&mut model, &eval_ds, 8, EvalMode::Sparse).unwrap();
    assert!(
        eval.accuracy > 0.9,
        "accuracy {} after {} epochs",
        eval.accuracy,
        cfg.train.epochs
    );
}

#[test]
fn zeroed_head_predicts_at_chance() {
    let cfg = RunConfig::desk_preset();
    let (_, eval_ds) = load_datasets(&cfg).unwrap();
    let mc = cfg.model_config().unwrap();
    let mut model: Model<f64> = Model::build(&mc, 1).unwrap();
    for t in &mut model.params.tensors {
        if t.name.starts_with("head") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let eval = evaluate(&mut model, &eval_ds, 32, EvalMode::Sparse).unwrap();
    // constant logits -> always class 0 -> exactly the uniform class share
    assert!((eval.accuracy - 1.0 / 12.0).abs() < 1e-12);
}

#[test]
fn accuracy_matches_hand_tally_on_fixture() {
    let cfg = tiny_cfg();
    let (_, eval_ds) = load_datasets(&cfg).unwrap();
    let mc = cfg.model_config().unwrap();
    let mut model: Model<f64> = Model::build(&mc, 3).unwrap();
    let eval = evaluate(&mut model, &eval_ds, 4, EvalMode::Sparse).unwrap();
    assert!(eval.records.len() >= 16);
    let mut tally = 0usize;
    for r in &eval.records {
        let mut best = 0;
        for (i, v) in r.logits.iter().enumerate() {
            if *v > r.logits[best] {
                best = i;
            }
        }
        assert_eq!(best, r.prediction);
        if best == r.label {
            tally += 1;
        }
    }
    assert_eq!(eval.accuracy, tally as f64 / eval.records.len() as f64);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = tiny_cfg();
    let (train_ds, _) = load_datasets(&cfg).unwrap();
    let mut short = cfg.clone();
    short.train.epochs = 2;
    let outcome = train::<f64>(&short, &train_ds, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    outcome.checkpoint.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path, Some(&short), false).unwrap();
    assert_eq!(loaded, outcome.checkpoint);
    loaded.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    // restore preserves evaluation exactly
    let (_, eval_ds) = load_datasets(&cfg).unwrap();
    let (mut m1, _, _) = outcome.checkpoint.restore::<f64>(&short).unwrap();
    let (mut m2, _, _) = loaded.restore::<f64>(&short).unwrap();
    let a = evaluate(&mut m1, &eval_ds, 8, EvalMode::Sparse).unwrap();
    let b = evaluate(&mut m2, &eval_ds, 8, EvalMode::Sparse).unwrap();
    assert_eq!(a.accuracy, b.accuracy);

    // config hash guards loading; --force semantics bypass it
    let mut other = short.clone();
    other.train.seed = 999;
    assert_ne!(config_hash(&short), config_hash(&other));
    assert!(Checkpoint::load(&path, Some(&other), false).is_err());
    assert!(Checkpoint::load(&path, Some(&other), true).is_ok());
}

#[test]
fn resume_reproduces_uninterrupted_run_bit_for_bit() {
    let mut cfg = tiny_cfg();
    cfg.model.moe.as_mut().unwrap().num_experts = 2;
    cfg.model.moe.as_mut().unwrap().k = 2;
    cfg.model.moe.as_mut().unwrap().constraint = ConstraintChoice::Importance;
    cfg.train.epochs = 4;
    let (train_ds, _) = load_datasets(&cfg).unwrap();

    let full = train::<f64>(&cfg, &train_ds, None).unwrap();

    let mut half = cfg.clone();
    half.train.epochs = 2;
    let first = train::<f64>(&half, &train_ds, None).unwrap();
    let resumed = train::<f64>(&cfg, &train_ds, Some(&first.checkpoint)).unwrap();

    assert_eq!(first.log.as_slice(), &full.log[..2]);
    assert_eq!(resumed.log.as_slice(), &full.log[2..]);
    assert_eq!(
        bincode::serialize(&resumed.checkpoint).unwrap(),
        bincode::serialize(&full.checkpoint).unwrap()
    );
}

#[test]
fn exploding_run_aborts_with_numeric_error() {
    // f32 so the blown-up weights genuinely overflow in the forward pass
    let mut cfg = tiny_cfg();
    cfg.train.precision = Precision::F32;
    cfg.optim.lr = 1e30;
    cfg.train.epochs = 3;
    let (train_ds, _) = load_datasets(&cfg).unwrap();
    match train::<f32>(&cfg, &train_ds, None) {
        Err(e @ Error::Numeric(_)) => assert_eq!(e.exit_code(), 3),
        Err(e) => panic!("expected numeric failure, got {e}"),
        Ok(_) => panic!("expected numeric failure, run succeeded"),
    }
}

#[test]
fn gate_logit_export_is_byte_identical_across_runs() {
    let mut cfg = tiny_cfg();
    cfg.model.moe.as_mut().unwrap().num_experts = 2;
    cfg.model.moe.as_mut().unwrap().k = 2;
    cfg.train.epochs = 2;
    let (train_ds, eval_ds) = load_datasets(&cfg).unwrap();
    let ckpt = train::<f64>(&cfg, &train_ds, None).unwrap().checkpoint;
    let export = || {
        let (mut model, _, _) = ckpt.restore::<f64>(&cfg).unwrap();
        let eval = evaluate(&mut model, &eval_ds, 8, EvalMode::Sparse).unwrap();
        report::gate_logits_csv(&eval.records)
    };
    let a = export();
    assert_eq!(a, export());
    assert!(a.starts_with("# resmoe gate-logits v1\n"));
    assert!(a.lines().nth(1).unwrap().starts_with("index,label,prediction"));
}

#[test]
fn sample_std_uses_n_minus_one() {
    let (mean, std) = mean_and_sample_std(&[0.5, 0.7]);
    assert!((mean - 0.6).abs() < 1e-12);
    assert!((std - 0.1414213562373095).abs() < 1e-12);
    let (_, one) = mean_and_sample_std(&[0.4]);
    assert_eq!(one, 0.0);
}

#[test]
fn dataset_model_class_mismatch_rejected() {
    let cfg = tiny_cfg();
    let ds = synthetic_clustered_dataset(1, &cfg.synthetic_spec(4)).unwrap();
    let mc = RunConfig::desk_preset().model_config().unwrap();
    let mut model: Model<f64> = Model::build(&mc, 0).unwrap();
    assert!(evaluate(&mut model, &ds, 8, EvalMode::Sparse).is_err());
}
