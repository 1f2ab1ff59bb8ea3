mod common;

use kinoplan::config::{Config, Optimizer};
use kinoplan::training::{checkpoint_paths, OptimizerState, Trainer};

fn tiny(iterations: usize) -> Config {
    let mut cfg = common::micro_config();
    cfg.train.iterations = iterations;
    cfg.train.batch = 4;
    cfg.train.pool_worlds = 4;
    cfg.train.horizon = 10;
    cfg
}

#[test]
fn full_chain_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let e = common::micro_chain_error(seed);
        assert!(e < 1e-2, "seed {seed}: rel err {e:.3e}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    for kind in [Optimizer::Adam, Optimizer::Sgd] {
        let mut cfg = tiny(3);
        cfg.train.lr = 0.0;
        cfg.train.optimizer = kind;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.params.clone();
        let rec = t.step().unwrap();
        assert_eq!(rec.iteration, 0);
        assert!(rec.total.is_finite() && rec.samples > 0);
        assert_eq!(t.params, before);
    }
}

#[test]
fn training_is_deterministic_and_resumes_bit_identically() {
    let cfg = tiny(6);
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(cfg.clone()).unwrap();
    let full_records = full.run(None).unwrap();

    let mut again = Trainer::new(cfg.clone()).unwrap();
    again.run(None).unwrap();
    assert_eq!(again.params, full.params);

    let mut short = cfg.clone();
    short.train.iterations = 3;
    let mut first = Trainer::new(short).unwrap();
    first.run(Some(dir.path())).unwrap();
    first.checkpoint(dir.path()).unwrap();
    let (params_path, optim_path) = checkpoint_paths(dir.path(), 3);
    assert!(params_path.exists() && optim_path.exists());

    let mut resumed = Trainer::resume(cfg, &params_path).unwrap();
    assert_eq!(resumed.iteration, 3);
    let rest = resumed.run(Some(dir.path())).unwrap();
    assert_eq!(resumed.params, full.params);
    assert_eq!(rest.len(), 3);
    assert_eq!(rest[0].total, full_records[3].total);

    let log = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);
    assert!(dir.path().join("final.params").exists());
}

#[test]
fn resume_without_checkpoint_is_an_error() {
    let err = Trainer::resume(tiny(1), std::path::Path::new("/nonexistent/ckpt.params"));
    assert!(matches!(err, Err(kinoplan::Error::MissingCheckpoint(_))));
}

#[test]
fn optimizer_state_round_trip() {
    let mut s = OptimizerState::new(Optimizer::Adam, 5);
    s.step = 17;
    s.m = vec![0.1, -0.2, 0.3, 1e-9, 4.0];
    s.v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
    let mut buf = Vec::new();
    s.write_to(&mut buf).unwrap();
    assert_eq!(OptimizerState::read_from(buf.as_slice()).unwrap(), s);
    buf[0] = b'X';
    assert!(OptimizerState::read_from(buf.as_slice()).is_err());
}

#[test]
fn single_sample_cost_decreases() {
    let mut cfg = tiny(200);
    cfg.network = Default::default();
    cfg.sensor.beams = 64;
    cfg.train.batch = 1;
    cfg.train.pool_worlds = 1;
    cfg.train.horizon = 20;
    let mut t = Trainer::new(cfg).unwrap();
    // Pin the batch to one sample.
    t.pool.worlds.truncate(1);
    let sample = t.pool.batch(&t.cfg, 0).remove(0);
    let mut totals = Vec::new();
    for _ in 0..200 {
        let (e, g) = t.pipeline.loss_and_grad(&t.params, &sample).unwrap();
        totals.push(e.cost.total);
        t.optimizer.apply(&mut t.params, &g, &t.cfg.train);
    }
    let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&totals[..50]), mean(&totals[150..]));
    assert!(tail < 0.8 * head, "first window {head:.3}, trailing window {tail:.3}");
}
