use super::*;
use crate::datasets::{generate_synthetic_domain, Style};
use crate::pseudolabel::{generate_pseudo_labels, CheckpointTeacher};

fn small_model() -> ModelConfig {
    ModelConfig { width: 4, depth: 2, seed: 1, ..ModelConfig::default() }
}

fn small_cfg(total: u64) -> TrainConfig {
    TrainConfig {
        batch_labeled: 2,
        batch_unlabeled: 2,
        learning_rate: 3e-3,
        alpha_schedule: AlphaSchedule { alpha_max: 1.0, ramp_iters: 4, ..AlphaSchedule::default() },
        seed: 9,
        mcc: MccConfig { pixel_subsample: Some(128), ..MccConfig::default() },
        ..TrainConfig::desk(total)
    }
}

fn aug() -> AugmentConfig {
    AugmentConfig { crop_size: 16, ..AugmentConfig::default() }
}

fn domain(style: Style, n: usize, seed: u64) -> Vec<TileSample> {
    generate_synthetic_domain(style, n, 16, seed)
}

#[test]
fn zero_iterations_rejected() {
    let err = TrainSession::supervised(small_cfg(0), small_model(), aug(), domain(Style::A, 2, 1)).err().unwrap();
    assert!(matches!(err, Error::Validation(_)), "{err}");
}

#[test]
fn mcc_role_must_be_a_training_role() {
    let cfg = TrainConfig { mcc_role: Role::Eval, ..small_cfg(5) };
    assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    let cfg = TrainConfig { mcc_role: Role::LabeledTarget, beta: 0.0, ..small_cfg(3) };
    let mut s = TrainSession::ssda(cfg, small_model(), aug(), domain(Style::A, 2, 1), domain(Style::B, 2, 2), None).unwrap();
    s.run(None).unwrap();
    assert!(s.log().iter().skip(1).all(|r| r.loss.mcc > 0.0));
}

#[test]
fn empty_labeled_set_rejected() {
    assert!(matches!(
        TrainSession::supervised(small_cfg(5), small_model(), aug(), vec![]),
        Err(Error::Validation(_))
    ));
}

#[test]
fn missing_pseudo_labels_with_positive_beta_is_a_config_error() {
    let r = TrainSession::ssda(small_cfg(5), small_model(), aug(), domain(Style::A, 2, 1), domain(Style::B, 2, 2), None);
    assert!(matches!(r, Err(Error::Config(_))));
    let cfg = TrainConfig { beta: 0.0, ..small_cfg(5) };
    assert!(TrainSession::ssda(cfg, small_model(), aug(), domain(Style::A, 2, 1), domain(Style::B, 2, 2), None).is_ok());
}

#[test]
fn crop_must_fit_the_network() {
    let a = AugmentConfig { crop_size: 10, ..aug() };
    assert!(TrainSession::supervised(small_cfg(5), small_model(), a, domain(Style::A, 2, 1)).is_err());
}

#[test]
fn identical_seeds_give_identical_logs() {
    let run = || {
        let mut s = TrainSession::supervised(small_cfg(6), small_model(), aug(), domain(Style::A, 3, 1)).unwrap();
        s.run(None).unwrap();
        (log_csv(s.log()), s.params().clone())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert!(pa.bit_identical(&pb));
    assert_eq!(a.lines().count(), 7);
    assert!(a.starts_with(LOG_HEADER));
}

#[test]
fn resume_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = {
        let mut s = TrainSession::supervised(small_cfg(3), small_model(), aug(), domain(Style::A, 3, 1)).unwrap();
        s.run(None).unwrap();
        CheckpointTeacher::new(s.model_checkpoint()).unwrap()
    };
    let unl = domain(Style::B, 3, 2);
    let pseudo = generate_pseudo_labels(&teacher, &unl, 0.6).unwrap();
    let make = || {
        TrainSession::ssda(small_cfg(8), small_model(), aug(), domain(Style::A, 3, 1), unl.clone(), Some(&pseudo))
            .unwrap()
    };
    let mut straight = make();
    straight.run(None).unwrap();

    let mut first = make();
    first.run_until(4).unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&first.state(), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, first.state());
    drop(first);
    let mut second = make();
    second.resume(loaded).unwrap();
    second.run(None).unwrap();
    assert!(second.params().bit_identical(straight.params()));
    assert_eq!(log_csv(second.log()), log_csv(straight.log()));
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 2, ..small_cfg(4) };
    let mut s = TrainSession::supervised(cfg, small_model(), aug(), domain(Style::A, 2, 1)).unwrap();
    s.run(Some(dir.path())).unwrap();
    let st = load_checkpoint(&dir.path().join("state_00000002.ckpt")).unwrap();
    assert_eq!(st.iteration, 2);
    assert_eq!(st.log.len(), 2);
    assert!(dir.path().join("state_00000004.ckpt").exists());
    assert!(s.step().is_err());
}

#[test]
fn truncated_state_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = TrainSession::supervised(small_cfg(1), small_model(), aug(), domain(Style::A, 2, 1)).unwrap();
    s.run(None).unwrap();
    let p = dir.path().join("s.ckpt");
    save_checkpoint(&s.state(), &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Corrupt { .. })));
    // a model-only archive is not a training state
    s.model_checkpoint().save(&p).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Corrupt { .. })));
}

#[test]
fn ssda_without_extra_terms_matches_supervised() {
    let cfg = TrainConfig {
        alpha_schedule: AlphaSchedule { alpha_max: 0.0, ..AlphaSchedule::default() },
        beta: 0.0,
        ..small_cfg(5)
    };
    let mut a = TrainSession::supervised(cfg.clone(), small_model(), aug(), domain(Style::A, 3, 1)).unwrap();
    a.run(None).unwrap();
    let mut b =
        TrainSession::ssda(cfg, small_model(), aug(), domain(Style::A, 3, 1), domain(Style::B, 3, 2), None).unwrap();
    b.run(None).unwrap();
    assert_eq!(log_csv(a.log()), log_csv(b.log()));
    assert!(a.params().bit_identical(b.params()));
}

#[test]
fn logged_alpha_follows_schedule() {
    let cfg = small_cfg(8);
    let mut s = TrainSession::ssda(
        TrainConfig { beta: 0.0, ..cfg.clone() },
        small_model(),
        aug(),
        domain(Style::A, 2, 1),
        domain(Style::B, 2, 2),
        None,
    )
    .unwrap();
    s.run(None).unwrap();
    assert!(alpha_column_matches(s.log(), &cfg.alpha_schedule));
    assert_eq!(s.log()[0].loss.alpha, 0.0);
    assert_eq!(s.log()[7].loss.alpha, 1.0);
    assert!(s.log().iter().all(|r| (0.0..=1.0).contains(&r.loss.mcc)));
}

#[test]
fn training_reduces_the_loss_across_seeds() {
    // on a fixed batch, a few steps lower the loss for every seed
    let tiles = domain(Style::A, 1, 3);
    for seed in 0..20 {
        let cfg = TrainConfig { batch_labeled: 1, seed, learning_rate: 1e-2, ..small_cfg(15) };
        let model = ModelConfig { seed, ..small_model() };
        let mut s = TrainSession::supervised(cfg, model, AugmentConfig::identity(16), tiles.clone()).unwrap();
        s.run(None).unwrap();
        let first = s.log()[0].loss.total;
        let last = s.log()[14].loss.total;
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn cosine_schedule_ends_at_zero() {
    let cfg = TrainConfig { lr_schedule: LrSchedule::Cosine, ..small_cfg(10) };
    assert_eq!(cfg.lr_at(0), cfg.learning_rate);
    assert!(cfg.lr_at(10).abs() < 1e-18);
    assert!(cfg.lr_at(5) < cfg.lr_at(4));
}
