use std::fs;

use spa_core::config::{parse_config, TrainConfig};
use spa_core::evalprobe::{run_pose_probe, ProbeConfig};
use spa_core::losses::LossToggles;
use spa_core::scenes::{generate_dataset, Dataset, DatasetConfig};
use spa_core::trainer::{read_metrics, TeacherSpec, Trainer, FINAL_CHECKPOINT, METRICS_FILE};

const TINY: &str = r#"{
  "steps": 10,
  "pixels_per_view": 16,
  "encoder.image_size": 16,
  "encoder.patch": 4,
  "encoder.dim": 16,
  "encoder.depth": 1,
  "encoder.heads": 2,
  "volume.dims": [6, 6, 4],
  "volume.channels": 8,
  "render.n_coarse": 8,
  "render.n_fine": 4
}"#;

fn tiny() -> TrainConfig {
    parse_config(TINY).unwrap()
}

fn data(n: usize) -> Dataset {
    generate_dataset(&DatasetConfig { width: 16, height: 16, views: 3, ..DatasetConfig::default() }, n, 21).unwrap()
}

fn fresh(cfg: &TrainConfig, ds: &Dataset) -> Trainer {
    Trainer::new(cfg, TeacherSpec::of(ds)).unwrap()
}

fn stores_equal(a: &Trainer, b: &Trainer) -> bool {
    a.store.iter().zip(b.store.iter()).all(|((_, x), (_, y))| x.value == y.value)
}

#[test]
fn ten_steps_write_ten_consistent_metric_rows() {
    let (cfg, ds) = (tiny(), data(3));
    let dir = tempfile::tempdir().unwrap();
    let mut tr = fresh(&cfg, &ds);
    let reports = tr.fit(&ds, dir.path(), None, |_| {}).unwrap();
    assert_eq!(reports.len(), 10);
    let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 10);
    let w = &cfg.losses;
    for (i, (step, lr, b)) in rows.iter().enumerate() {
        assert_eq!(*step, i as u64 + 1);
        assert_eq!(*lr, tr.lr_at(i as u64));
        let sum = w.color * b.color
            + w.depth * b.depth
            + w.semantic * b.semantic
            + w.eikonal * b.eikonal
            + w.sdf * b.sdf_near
            + w.free * b.free;
        assert!((sum - b.total).abs() <= 1e-6 * b.total.abs().max(1.0), "{sum} vs {}", b.total);
        assert!(b.total.is_finite());
    }
    assert!(dir.path().join(FINAL_CHECKPOINT).exists());
}

#[test]
fn training_is_bit_deterministic() {
    let (cfg, ds) = (tiny(), data(2));
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut tr = fresh(&cfg, &ds);
        let r = tr.fit(&ds, dir.path(), Some(4), |_| {}).unwrap();
        (r.iter().map(|r| r.breakdown.total.to_bits()).collect::<Vec<_>>(), fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let (cfg, ds) = (tiny(), data(3));
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = fresh(&cfg, &ds);
    let full_reports = full.fit(&ds, full_dir.path(), Some(6), |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = fresh(&cfg, &ds);
    first.fit(&ds, dir.path(), Some(3), |_| {}).unwrap();
    let mut resumed = Trainer::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(resumed.step(), 3);
    let rest = resumed.fit(&ds, dir.path(), Some(6), |_| {}).unwrap();

    let tail: Vec<u64> = full_reports[3..].iter().map(|r| r.breakdown.total.to_bits()).collect();
    assert_eq!(tail, rest.iter().map(|r| r.breakdown.total.to_bits()).collect::<Vec<_>>());
    assert!(stores_equal(&full, &resumed));
    assert_eq!(full.optim, resumed.optim);
    assert_eq!(full.ema, resumed.ema);
    // The appended metrics log matches the uninterrupted one row for row.
    assert_eq!(
        read_metrics(&full_dir.path().join(METRICS_FILE)).unwrap(),
        read_metrics(&dir.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let (cfg, ds) = (tiny(), data(2));
    let dir = tempfile::tempdir().unwrap();
    let mut tr = fresh(&cfg, &ds);
    tr.fit(&ds, dir.path(), Some(2), |_| {}).unwrap();
    let a = dir.path().join(FINAL_CHECKPOINT);
    let b = dir.path().join("again.spac");
    let back = Trainer::load(&a).unwrap();
    back.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(back.cfg, tr.cfg);
    assert!(stores_equal(&back, &tr));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (cfg, ds) = (tiny(), data(1));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.spac");
    fresh(&cfg, &ds).save(&path).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad_header = good.clone();
    bad_header[20] ^= 0xff;
    fs::write(&path, &bad_header).unwrap();
    let e = Trainer::load(&path).unwrap_err().to_string();
    assert!(e.contains("c.spac"), "{e}");

    fs::write(&path, &good[..good.len() - 8]).unwrap();
    assert!(Trainer::load(&path).is_err());

    let mut bad_magic = good;
    bad_magic[0] = b'X';
    fs::write(&path, &bad_magic).unwrap();
    assert!(Trainer::load(&path).is_err());
}

#[test]
fn disabled_terms_contribute_nothing() {
    let mut cfg = tiny();
    cfg.term_grad_norms = true;
    cfg.toggles = LossToggles {
        color: true,
        depth: false,
        semantic: false,
        eikonal: false,
        sdf: false,
        free: false,
    };
    let ds = data(2);
    let mut tr = fresh(&cfg, &ds);
    for s in 0..3 {
        let r = tr.train_step(&ds.samples[s % 2]).unwrap();
        let b = r.breakdown;
        assert_eq!([b.depth, b.semantic, b.eikonal, b.sdf_near, b.free], [0.0; 5]);
        assert!((b.total - cfg.losses.color * b.color).abs() <= 1e-6 * b.total, "{} vs {}", b.total, b.color);
        let gn = r.term_grad_norms.unwrap();
        assert!(gn[0] > 0.0);
        assert_eq!(&gn[1..], &[0.0; 5]);
    }
}

#[test]
fn parameter_count_is_fixed_by_the_config() {
    let (cfg, ds) = (tiny(), data(2));
    let mut tr = fresh(&cfg, &ds);
    let n = tr.store.scalar_count();
    let names: Vec<String> = tr.store.iter().map(|(_, p)| p.name.clone()).collect();
    tr.train_step(&ds.samples[0]).unwrap();
    assert_eq!(tr.store.scalar_count(), n);
    assert_eq!(tr.store.iter().map(|(_, p)| p.name.clone()).collect::<Vec<_>>(), names);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_eq!(fresh(&other, &ds).store.scalar_count(), n);
}

#[test]
fn invalid_settings_are_rejected() {
    let ds = data(1);
    let mut cfg = tiny();
    cfg.mask_ratio = 1.5;
    assert!(Trainer::new(&cfg, TeacherSpec::of(&ds)).is_err());
    let mut cfg = tiny();
    cfg.render.semantic_dim = 7;
    assert!(Trainer::new(&cfg, TeacherSpec::of(&ds)).is_err());
    // A dataset whose semantic teacher differs from the one the model was built for.
    let mut tr = fresh(&tiny(), &ds);
    let other = generate_dataset(&DatasetConfig { width: 16, height: 16, teacher_dim: 8, ..DatasetConfig::default() }, 1, 21)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(tr.fit(&other, dir.path(), Some(1), |_| {}).is_err());
    assert_eq!(tr.step(), 0);
}

#[test]
fn probing_leaves_the_encoder_untouched() {
    let (cfg, ds) = (tiny(), data(5));
    let tr = fresh(&cfg, &ds);
    let before = tr.ema_store();
    let probe = ProbeConfig { hidden: vec![16], epochs: 2, ..ProbeConfig::default() };
    let errs = run_pose_probe(&ds, 20, &tr.model, &before, &probe, 3).unwrap();
    assert!(errs.mean_trans.is_finite() && errs.mean_rot.is_finite());
    let after = tr.ema_store();
    assert!(before.iter().zip(after.iter()).all(|((_, a), (_, b))| a.value == b.value));
}
