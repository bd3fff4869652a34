use std::path::Path;

use cace_core::harness::{
    ExperimentConfig, Harness, HarnessError, RunManifest, RunOptions, Store, TrainStage,
    EXIT_DIAGNOSTIC_FAILURE,
};

const SMOKE: &str = include_str!("../../../configs/smoke.toml");

fn harness(toml: &str, dir: &Path, seed: Option<u64>) -> Harness {
    let cfg = ExperimentConfig::from_toml_str(toml).unwrap();
    let opts = RunOptions {
        seed,
        out: Some(dir.join("out")),
        force: false,
    };
    Harness::new(cfg, opts)
        .unwrap()
        .with_store(Store::new(dir.join("cache")))
}

#[test]
fn rerun_reuses_every_cached_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(SMOKE, dir.path(), None);
    let g = h.generate().unwrap();
    let t = h.train(TrainStage::All).unwrap();
    assert!(!g.built.is_empty() && g.reused.is_empty());
    assert!(!t.built.is_empty() && t.reused.is_empty());
    h.estimate().unwrap();
    let first = std::fs::read(h.results_csv()).unwrap();

    let h = harness(SMOKE, dir.path(), None);
    let g = h.generate().unwrap();
    let t = h.train(TrainStage::All).unwrap();
    assert!(g.built.is_empty(), "{:?}", g.built);
    assert!(t.built.is_empty(), "{:?}", t.built);
    h.estimate().unwrap();
    assert_eq!(std::fs::read(h.results_csv()).unwrap(), first);

    let m = RunManifest::load_or_default(&dir.path().join("out/manifest.json")).unwrap();
    m.verify().unwrap();
    assert_eq!(m.master_seed, 1);
    assert!(m.stage_seeds.contains_key("dataset"));
    assert!(m.notes.iter().any(|n| n.contains("clipped")));
    assert!(m.notes.iter().any(|n| n.contains("VAE hyperparameters")));
}

#[test]
fn independent_runs_write_identical_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ha = harness(SMOKE, a.path(), None);
    let hb = harness(SMOKE, b.path(), None);
    let (ea, da) = ha.run_all().unwrap();
    let (eb, db) = hb.run_all().unwrap();
    assert_eq!(ea.unwrap().table, eb.unwrap().table);
    let (da, db) = (da.unwrap(), db.unwrap());
    assert_eq!(da.all_passed, db.all_passed);
    ha.write_outputs().unwrap();
    hb.write_outputs().unwrap();
    for f in ["results.csv", "results.jsonl", "table.txt"] {
        assert_eq!(
            std::fs::read(a.path().join("out").join(f)).unwrap(),
            std::fs::read(b.path().join("out").join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = std::fs::read_to_string(ha.results_csv()).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("run_id,dataset,bias_or_sigma"));
    // 2 cells x 5 estimators + 2 diagnostics.
    assert_eq!(lines.count(), 12);
}

#[test]
fn seed_override_changes_the_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ha = harness(SMOKE, a.path(), None);
    let hb = harness(SMOKE, b.path(), Some(99));
    for h in [&ha, &hb] {
        h.generate().unwrap();
        h.train(TrainStage::Classifier).unwrap();
    }
    assert_ne!(
        ha.dataset(0, cace_core::data::Split::Train).unwrap().records[0].pixels,
        hb.dataset(0, cace_core::data::Split::Train).unwrap().records[0].pixels
    );
}

#[test]
fn estimating_before_training_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(SMOKE, dir.path(), None);
    let err = h.estimate().unwrap_err();
    assert!(matches!(err, HarnessError::MissingArtifact(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    h.generate().unwrap();
    let err = h.estimate().unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    let err = h.report().unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn empty_estimator_list_is_a_config_error() {
    let toml = SMOKE.replace(r#"run = ["gt", "dec", "enc_dec", "con_exp", "tcav"]"#, "run = []");
    let err = ExperimentConfig::from_toml_str(&toml)
        .and_then(|c| c.validate().map(|_| c))
        .unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("estimators"), "{err}");
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    for bad in [
        SMOKE.replace("n_samples = 200", "n_sample = 200"),
        SMOKE.replace("sigma = [0.02, 0.05]", "sigma = [-0.1]"),
        SMOKE.replace(r#"family = "colored_digits""#, r#"family = "mnist""#),
        SMOKE.replace(r#"estimator = "enc_dec""#, r#"estimator = "con_exp""#),
    ] {
        let err = ExperimentConfig::from_toml_str(&bad).and_then(|c| c.validate().map(|_| c));
        assert!(matches!(err, Err(HarnessError::Config(_))), "{err:?}");
    }
}

#[test]
fn corrupted_checkpoint_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(SMOKE, dir.path(), None);
    h.generate().unwrap();
    h.train(TrainStage::Classifier).unwrap();
    let models = dir.path().join("cache/models");
    for entry in std::fs::read_dir(&models).unwrap() {
        let ckpt = entry.unwrap().path();
        let mut bytes = std::fs::read(&ckpt).unwrap();
        let i = bytes.len() / 2;
        bytes[i] ^= 0xff;
        std::fs::write(&ckpt, bytes).unwrap();
    }
    let m = RunManifest::load_or_default(&dir.path().join("out/manifest.json")).unwrap();
    assert!(matches!(m.verify(), Err(HarnessError::Corrupt(_))));
    assert!(h.classifier(0, 0).is_err());
}

#[test]
fn diagnostic_failure_has_its_own_exit_code() {
    assert_eq!(EXIT_DIAGNOSTIC_FAILURE, 3);
}
