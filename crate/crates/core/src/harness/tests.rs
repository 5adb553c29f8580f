use super::*;
use crate::encoders::BASE_MOMENTUM;
use crate::synthdata::{generate_dataset, Split, SyntheticDataset};
use crate::Error;

fn tiny() -> (RunConfig, SyntheticDataset) {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "--n-identities=8",
        "--samples-per-id=4",
        "--d-model=16",
        "--heads=2",
        "--ff-hidden=32",
        "--d-joint=16",
        "--projector-hidden=16",
        "--epochs=2",
        "--batch-size=8",
    ])
    .unwrap();
    let ds = generate_dataset(&cfg.data, cfg.data_seed).unwrap();
    (cfg, ds)
}

#[test]
fn config_text_round_trips() {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&["--mask-strategy=random", "--seeds=3,5,8", "--sdm=on", "--bsdm=off", "--lr=0.001"])
        .unwrap();
    let back = RunConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.seeds, vec![3, 5, 8]);
    assert_eq!(back.mask_strategy, MaskStrategy::Random);
}

#[test]
fn config_parser_ignores_comments_and_rejects_junk() {
    let cfg = RunConfig::from_text("# header\n\nepochs = 7  # short\n").unwrap();
    assert_eq!(cfg.epochs, 7);
    assert!(matches!(RunConfig::from_text("epochs 7"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_text("nonsense = 1"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_text("epochs = many"), Err(Error::Config(_))));
    let mut c = RunConfig::default();
    assert!(matches!(c.apply_overrides(&["epochs=3"]), Err(Error::Config(_))));
}

#[test]
fn exclusive_and_empty_loss_sets_are_rejected() {
    let mut cfg = RunConfig::default();
    cfg.losses.sdm = true;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let cfg = RunConfig {
        losses: LossToggles {
            bsdm: false,
            sdm: false,
            waf: false,
            id: false,
            awm: false,
        },
        ..RunConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let cfg = RunConfig {
        mask_ratio: 1.0,
        ..RunConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn zero_epochs_logs_only_the_initial_evaluation() {
    let (mut cfg, ds) = tiny();
    cfg.epochs = 0;
    let out = train(&cfg, &ds).unwrap();
    assert!(out.log.steps.is_empty());
    assert_eq!(out.log.epochs.len(), 1);
    assert_eq!(out.log.epochs[0].epoch, 0);
    assert_eq!(out.log.best_epoch, 0);
    assert!(out.log.epochs[0].mean_total.is_none());
}

#[test]
fn logged_total_is_the_sum_of_components() {
    let (cfg, ds) = tiny();
    let out = train(&cfg, &ds).unwrap();
    assert!(!out.log.steps.is_empty());
    for s in &out.log.steps {
        assert!((s.total - s.components.sum()).abs() <= 1e-10, "{s:?}");
        assert!(s.components.get("bsdm").is_some());
        assert!(s.components.get("sdm").is_none());
        for c in ["itc", "simclr", "byol", "waf", "id"] {
            assert!(s.components.get(c).is_some(), "{c}");
        }
    }
    assert_eq!(out.log.epochs.len(), cfg.epochs + 1);
}

#[test]
fn single_enabled_term_equals_total() {
    let (mut cfg, ds) = tiny();
    cfg.losses = LossToggles {
        bsdm: false,
        sdm: false,
        waf: false,
        id: true,
        awm: false,
    };
    let out = train(&cfg, &ds).unwrap();
    for s in &out.log.steps {
        assert_eq!(s.total, s.components.get("id").unwrap());
        assert_eq!(s.components.0.iter().flatten().count(), 1);
    }
}

#[test]
fn momentum_schedule_is_monotone_with_exact_endpoints() {
    let (cfg, ds) = tiny();
    let m = train(&cfg, &ds).unwrap().log.momenta();
    assert!(m.len() >= 2);
    assert_eq!(m[0], BASE_MOMENTUM);
    assert_eq!(*m.last().unwrap(), 1.0);
    assert!(m.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn training_is_bitwise_reproducible() {
    let (cfg, ds) = tiny();
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.steps_csv(), b.log.steps_csv());
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    a.best.save(&pa).unwrap();
    b.best.save(&pb).unwrap();
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
}

#[test]
fn different_seeds_give_different_runs() {
    let (cfg, ds) = tiny();
    let a = train(&cfg, &ds).unwrap();
    let other = RunConfig { seed: 1, ..cfg };
    let b = train(&other, &ds).unwrap();
    assert_ne!(a.log.steps[0].total, b.log.steps[0].total);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let (cfg, ds) = tiny();
    let out = train(&cfg, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    out.best.save(&path).unwrap();
    let loaded = Model::load(&cfg, &path).unwrap();
    let a = out.best.evaluate(&ds, Split::Test).unwrap();
    let b = loaded.evaluate(&ds, Split::Test).unwrap();
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.summary, out.log.test);

    let mut wrong = cfg.clone();
    wrong.encoder.d_joint = 8;
    assert!(Model::load(&wrong, &path).is_err());
}

#[test]
fn run_log_files_are_written() {
    let (cfg, ds) = tiny();
    let out = train(&cfg, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.log.write(dir.path()).unwrap();
    let steps = std::fs::read_to_string(dir.path().join("steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), out.log.steps.len() + 1);
    let epochs = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), cfg.epochs + 2);
    assert!(dir.path().join("summary.txt").exists());
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let (mut cfg, ds) = tiny();
    cfg.lr = 1e200;
    cfg.epochs = 3;
    match train(&cfg, &ds) {
        Err(Error::Divergence { component, value, .. }) => {
            assert!(!value.is_finite());
            assert!(component == "features" || component == "total" || COMPONENTS.contains(&component.as_str()));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn batches_always_mix_identities() {
    let (cfg, ds) = tiny();
    let train_idx = ds.split_indices(Split::Train);
    let batches = make_batches(&train_idx, &ds, cfg.batch_size).unwrap();
    let flat: Vec<usize> = batches.iter().flatten().copied().collect();
    assert_eq!(flat, train_idx);
    for b in &batches {
        let first = ds.samples[b[0]].image.identity;
        assert!(b.len() >= 2 && b.iter().any(|&i| ds.samples[i].image.identity != first));
    }
    let one_id: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| ds.samples[i].image.identity == ds.samples[train_idx[0]].image.identity)
        .collect();
    assert!(matches!(make_batches(&one_id, &ds, 2), Err(Error::Batch(_))));
}

#[test]
fn mismatched_dataset_geometry_is_rejected() {
    let (cfg, ds) = tiny();
    let mut other = cfg.clone();
    other.data.patch_dim = 10;
    other.data.d_sig = 10;
    assert!(matches!(train(&other, &ds), Err(Error::Config(_))));
}

#[test]
fn gradient_check_command_passes() {
    let report = gradcheck_cmd(&GRADCHECK_LOSSES, 3, 11).unwrap();
    assert_eq!(report.entries.len(), GRADCHECK_LOSSES.len());
    assert!(report.passed(), "{}", report.render());
    assert!(gradcheck_cmd(&["focal"], 1, 0).is_err());
}

#[test]
fn sweep_and_plots_write_their_files() {
    let (mut cfg, ds) = tiny();
    cfg.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep_mask_ratio(&cfg, &ds, &[0.2, 0.5], &[MaskStrategy::Awm, MaskStrategy::Random], &[0], dir.path())
        .unwrap();
    assert_eq!(rows.len(), 4);
    let summary = dir.path().join("sweep_summary.csv");
    let text = std::fs::read_to_string(&summary).unwrap();
    assert_eq!(text.lines().count(), 5);
    let written = emit_plots(&[summary], &dir.path().join("plots")).unwrap();
    assert_eq!(written.len(), 2);
    for p in written {
        assert!(std::fs::metadata(p).unwrap().len() > 0);
    }
}

#[test]
fn compare_writes_one_row_per_run() {
    let (mut cfg, ds) = tiny();
    cfg.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let rows = compare_losses(&cfg, &ds, &["bsdm", "sdm"], &[0.5], &[0], dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    let text = std::fs::read_to_string(dir.path().join("compare_losses.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(compare_losses(&cfg, &ds, &["itc"], &[0.5], &[0], dir.path()).is_err());
}
