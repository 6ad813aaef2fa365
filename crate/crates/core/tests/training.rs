mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sagvae::cli::Prepared;
use sagvae::training::{elbo_loss, temperature_schedule, TrainReport};
use sagvae::{train, Error, ReconLoss, SagVae, Tape, TrainConfig};

fn same_curves(a: &TrainReport, b: &TrainReport) -> bool {
    a.epochs == b.epochs && a.final_gap == b.final_gap
}

#[test]
fn karate_loss_falls_over_500_epochs() {
    let (p, cfg) = common::karate_setup(0, 12);
    let x = Prepared::flat(&p.train);
    let mut model = SagVae::new(cfg).unwrap();
    let mut tc = TrainConfig::new(500, 48, ReconLoss::MeanSquaredError);
    tc.seed = 1;
    let report = train(&mut model, &x, &tc, None).unwrap();
    let (first, last) = (&report.epochs[0], report.last().unwrap());
    assert_eq!(report.epochs.len(), 500);
    assert!(last.total < first.total, "{} -> {}", first.total, last.total);
    for e in &report.epochs {
        assert!([e.recon, e.kl_z, e.kl_a, e.total].iter().all(|v| v.is_finite()));
        assert!(e.kl_z >= 0.0 && e.kl_a >= 0.0, "epoch {}: {} {}", e.epoch, e.kl_z, e.kl_a);
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (p, cfg) = common::karate_setup(2, 5);
    let x = Prepared::flat(&p.train);
    let mut model = SagVae::new(cfg).unwrap();
    let before = model.store.clone();
    let mut tc = TrainConfig::new(3, 8, ReconLoss::MeanSquaredError);
    tc.learning_rate = 0.0;
    train(&mut model, &x, &tc, None).unwrap();
    for id in before.ids() {
        assert_eq!(before.get(id).data(), model.store.get(id).data(), "{}", before.name(id));
    }
}

#[test]
fn same_seed_same_report() {
    let (p, cfg) = common::karate_setup(4, 6);
    let x = Prepared::flat(&p.train);
    let mut tc = TrainConfig::new(4, 10, ReconLoss::MeanSquaredError);
    tc.seed = 9;
    let run = |tc: &TrainConfig| {
        let mut model = SagVae::new(cfg.clone()).unwrap();
        let r = train(&mut model, &x, tc, None).unwrap();
        (r, model.to_bytes())
    };
    let (a, ma) = run(&tc);
    let (b, mb) = run(&tc);
    assert!(same_curves(&a, &b));
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(ma, mb);
    tc.seed = 10;
    assert!(!same_curves(&a, &run(&tc).0));
    assert!(a.to_csv().starts_with("epoch,recon,kl_z,kl_a,total\n"));
}

#[test]
fn checkpoint_written_each_epoch_round_trips() {
    let (p, cfg) = common::karate_setup(1, 4);
    let x = Prepared::flat(&p.train);
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("model.ckpt");
    let mut model = SagVae::new(cfg).unwrap();
    train(&mut model, &x, &TrainConfig::new(2, 8, ReconLoss::MeanSquaredError), Some(&ck)).unwrap();
    let loaded = SagVae::load(&ck).unwrap();
    assert_eq!(loaded.to_bytes(), model.to_bytes());
    assert_eq!(loaded.reconstruct(&x).unwrap(), model.reconstruct(&x).unwrap());
}

#[test]
fn divergence_restores_last_good_parameters() {
    let (p, cfg) = common::karate_setup(3, 4);
    let x = Prepared::flat(&p.train);
    let mut model = SagVae::new(cfg).unwrap();
    let before = model.store.clone();
    let mut tc = TrainConfig::new(2, 4, ReconLoss::MeanSquaredError);
    tc.divergence_threshold = 1e-9;
    let err = train(&mut model, &x, &tc, None).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 1, restored: 0, .. }), "{err}");
    for id in before.ids() {
        assert_eq!(before.get(id).data(), model.store.get(id).data());
    }
}

#[test]
fn reported_total_is_sum_of_parts() {
    let (model, recon) = common::tiny_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = common::uniform(&mut rng, &[4, 15], 0.1, 0.9);
    let mut tape = Tape::with_params(&model.store);
    let xv = tape.constant(x);
    let e = elbo_loss(&mut tape, &model, xv, 0.8, recon, 0.01, &mut rng).unwrap();
    let v = |var| tape.value(var).item().unwrap();
    assert!((v(e.total) - (v(e.recon) + v(e.kl_z) + v(e.kl_a))).abs() <= 1e-12);
}

#[test]
fn temperature_endpoints_and_midpoint() {
    let mut tc = TrainConfig::new(10, 1, ReconLoss::MeanSquaredError);
    tc.tau_end = 0.25;
    tc.tau_anneal_epochs = Some(10);
    assert_eq!(temperature_schedule(0, &tc), 1.0);
    assert!((temperature_schedule(5, &tc) - 0.5).abs() < 1e-12);
    assert_eq!(temperature_schedule(10, &tc), 0.25);
    assert_eq!(temperature_schedule(99, &tc), 0.25);
}

#[test]
fn karate_beta_default() {
    let (_, cfg) = common::karate_setup(0, 1);
    assert!((cfg.default_beta_a() - 1.0 / 1122.0).abs() < 1e-15);
    assert!((cfg.default_beta_a() - 8.913e-4).abs() < 1e-6);
}
