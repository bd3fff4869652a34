//! Config-driven experiment pipeline: generate → train → estimate →
//! diagnose → report, with a content-addressed artifact cache.
//!
//! # Seeds
//!
//! The master seed fans out through [`mix_seed`] with a fixed stream per
//! stage, so adding a stage never perturbs another stage's randomness:
//!
//! | stream | stage                                                    |
//! |--------|----------------------------------------------------------|
//! | 1      | dataset generation (shared by every sweep cell)          |
//! | 2      | classifier init/shuffling, then `mix_seed(_, arch index)` |
//! | 3      | VAE training                                             |
//! | 4      | estimators, then `mix_seed(_, row index)`                |
//! | 5      | dummy-marker augmentation, then 0 = train, 1 = test      |
//! | 6      | diagnostics                                              |
//!
//! Every sweep cell reuses the same dataset and model seeds, so cells differ
//! only in the swept parameter.

mod config;
mod results;
mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use thiserror::Error;

pub use config::{
    Cell, ClassifierSection, DatasetSection, DiagnosticsSection, EstimatorSection, ExperimentConfig,
    FamilyName, OutputSection, SweepSection,
};
pub use results::{read_jsonl, render_table, write_csv, write_jsonl, ResultRow, CSV_COLUMNS};
pub use store::{cache_root, ArtifactEntry, RunManifest, Store, CACHE_ENV};

use crate::data::{
    add_dummy_concept, generate_bars, generate_colored_digits, ConceptAxis, DataError, Dataset,
    DatasetFamily, Split, DATASET_FORMAT_VERSION,
};
use crate::diagnostics::{null_effect_test, positive_effect_test, DiagnosticConfig, DiagnosticReport};
use crate::digest::{json_digest, mix_seed};
use crate::estimators::{
    conexp, dec_cace, encdec_cace, gt_cace, tcav_score, CaceReport, ConceptSpec, Estimator, EstimatorError,
};
use crate::models::{
    train_classifier, train_cvae, Classifier, ConditionalVae, GeneratorOracle, ModelError, SavedModel,
    VaeConfig, CHECKPOINT_VERSION,
};

pub const STREAM_DATA: u64 = 1;
pub const STREAM_CLASSIFIER: u64 = 2;
pub const STREAM_VAE: u64 = 3;
pub const STREAM_ESTIMATOR: u64 = 4;
pub const STREAM_DUMMY: u64 = 5;
pub const STREAM_DIAGNOSTICS: u64 = 6;

pub const CODE_VERSION: &str = concat!("cace-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("artifact corrupted: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Process exit code: 1 config (and anything unexpected), 2 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::MissingArtifact(_) => 2,
            _ => 1,
        }
    }
}

/// Exit code for a diagnostics run in which some test failed.
pub const EXIT_DIAGNOSTIC_FAILURE: i32 = 3;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the master seed.
    pub seed: Option<u64>,
    /// Overrides `[output] dir`.
    pub out: Option<PathBuf>,
    /// Ignore cached artifacts and rebuild them.
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Classifier,
    Vae,
    All,
}

#[derive(Debug, Clone)]
struct DatasetJob {
    key: String,
    name: String,
    cell: Cell,
    dummy: Option<(f64, u64)>,
}

#[derive(Debug, Clone)]
struct ClassifierJob {
    key: String,
    name: String,
    dataset: usize,
    section: ClassifierSection,
    seed: u64,
}

#[derive(Debug, Clone)]
struct VaeJob {
    key: String,
    name: String,
    dataset: usize,
    config: VaeConfig,
}

#[derive(Debug, Clone)]
struct DiagnosticsPlan {
    dataset: usize,
    classifier: usize,
    label_vae: Option<usize>,
    dummy_vae: Option<usize>,
}

/// Every artifact the config implies, with its cache key.
#[derive(Debug, Clone)]
struct Plan {
    datasets: Vec<DatasetJob>,
    classifiers: Vec<ClassifierJob>,
    vaes: Vec<VaeJob>,
    /// `(dataset cell, arch) -> classifier job` for the estimation grid.
    grid: Vec<(usize, usize)>,
    /// VAE job per estimation dataset, if any.
    cell_vaes: Vec<Option<usize>>,
    diagnostics: Option<DiagnosticsPlan>,
    stage_seeds: BTreeMap<String, u64>,
}

fn short(digest: String) -> String {
    digest[..16].to_string()
}

fn plan(config: &ExperimentConfig, seed: u64) -> Plan {
    let data_seed = mix_seed(seed, STREAM_DATA);
    let clf_seed = mix_seed(seed, STREAM_CLASSIFIER);
    let vae_seed = mix_seed(seed, STREAM_VAE);
    let dummy_seed = mix_seed(seed, STREAM_DUMMY);
    let mut stage_seeds = BTreeMap::new();
    stage_seeds.insert("dataset".to_string(), data_seed);
    stage_seeds.insert("classifier".to_string(), clf_seed);
    stage_seeds.insert("vae".to_string(), vae_seed);
    stage_seeds.insert("estimator".to_string(), mix_seed(seed, STREAM_ESTIMATOR));
    stage_seeds.insert("dummy".to_string(), dummy_seed);
    stage_seeds.insert("diagnostics".to_string(), mix_seed(seed, STREAM_DIAGNOSTICS));

    let seeded = |mut cell: Cell| {
        match &mut cell.family {
            DatasetFamily::Bars(c) => c.seed = data_seed,
            DatasetFamily::ColoredDigits(c) => c.seed = data_seed,
        }
        cell
    };
    let dataset_job = |cell: Cell, dummy: Option<(f64, u64)>, name: String| DatasetJob {
        key: short(json_digest(&json!({
            "kind": "dataset",
            "family": cell.family,
            "dummy": dummy,
            "format": DATASET_FORMAT_VERSION,
        }))),
        name,
        cell,
        dummy,
    };
    let classifier_job = |datasets: &[DatasetJob], dataset: usize, arch: usize, name: String| {
        let section = config.classifier[arch].clone();
        let seed = mix_seed(clf_seed, arch as u64);
        ClassifierJob {
            key: short(json_digest(&json!({
                "kind": "classifier",
                "dataset": datasets[dataset].key,
                "section": section,
                "seed": seed,
                "checkpoint": CHECKPOINT_VERSION,
            }))),
            name,
            dataset,

            section,
            seed,
        }
    };
    let vae_job = |datasets: &[DatasetJob], dataset: usize, axis: ConceptAxis, name: String| {
        let mut cfg = config.vae.clone().unwrap_or_default();
        cfg.concept_axis = axis;
        cfg.training.seed = vae_seed;
        VaeJob {
            key: short(json_digest(&json!({
                "kind": "vae",
                "dataset": datasets[dataset].key,
                "config": cfg,
                "checkpoint": CHECKPOINT_VERSION,
            }))),
            name,
            dataset,
            config: cfg,
        }
    };

    let cells = config.cells();
    let mut datasets: Vec<DatasetJob> = cells
        .iter()
        .map(|c| dataset_job(seeded(c.clone()), None, format!("c{:02}", c.index)))
        .collect();
    let mut classifiers = Vec::new();
    let mut grid = Vec::new();
    let mut vaes = Vec::new();
    let mut cell_vaes = Vec::new();
    if config.estimators.is_some() {
        for d in 0..datasets.len() {
            for a in 0..config.classifier.len() {
                grid.push((d, classifiers.len()));
                classifiers.push(classifier_job(&datasets, d, a, format!("c{d:02}-a{a}")));
            }
            if config.needs_vae() {
                cell_vaes.push(Some(vaes.len()));
                vaes.push(vae_job(&datasets, d, ConceptAxis::Primary, format!("c{d:02}")));
            } else {
                cell_vaes.push(None);
            }
        }
    }
    let diagnostics = config.diagnostics.as_ref().map(|diag| {
        let p = config.dataset.dummy_p.expect("validated");
        let cell = seeded(cells[diag.cell].clone());
        datasets.push(dataset_job(cell, Some((p, dummy_seed)), "diag".into()));
        let dataset = datasets.len() - 1;
        classifiers.push(classifier_job(&datasets, dataset, 0, "diag-a0".into()));
        let classifier = classifiers.len() - 1;
        let (mut label_vae, mut dummy_vae) = (None, None);
        if diag.estimator != Estimator::Gt {
            vaes.push(vae_job(
                &datasets,
                dataset,
                ConceptAxis::Label,
                "diag-label".into(),
            ));
            label_vae = Some(vaes.len() - 1);
            vaes.push(vae_job(
                &datasets,
                dataset,
                ConceptAxis::Dummy,
                "diag-dummy".into(),
            ));
            dummy_vae = Some(vaes.len() - 1);
        }
        DiagnosticsPlan {
            dataset,
            classifier,
            label_vae,
            dummy_vae,
        }
    });
    Plan {
        datasets,
        classifiers,
        vaes,
        grid,
        cell_vaes,
        diagnostics,
        stage_seeds,
    }
}

/// What a `generate` or `train` call did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageOutcome {
    pub built: Vec<String>,
    pub reused: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EstimateOutcome {
    pub rows: Vec<ResultRow>,
    pub table: String,
}

#[derive(Debug, Clone)]
pub struct DiagnoseOutcome {
    pub rows: Vec<ResultRow>,
    pub reports: Vec<DiagnosticReport>,
    pub all_passed: bool,
    pub table: String,
}

/// A loaded experiment, bound to an output directory and cache.
pub struct Harness {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub store: Store,
    pub force: bool,
    plan: Plan,
}

fn dataset_from_job(job: &DatasetJob) -> Result<(Dataset, Dataset), HarnessError> {
    let splits = match &job.cell.family {
        DatasetFamily::Bars(c) => generate_bars(c)?,
        DatasetFamily::ColoredDigits(c) => generate_colored_digits(c)?,
    };
    match job.dummy {
        None => Ok((splits.train, splits.test)),
        Some((p, seed)) => Ok((
            add_dummy_concept(&splits.train, p, mix_seed(seed, 0))?,
            add_dummy_concept(&splits.test, p, mix_seed(seed, 1))?,
        )),
    }
}

fn family_tag(family: &DatasetFamily) -> &'static str {
    match family {
        DatasetFamily::Bars(_) => "bars",
        DatasetFamily::ColoredDigits(_) => "colored_digits",
    }
}

impl Harness {
    pub fn new(config: ExperimentConfig, opts: RunOptions) -> Result<Self, HarnessError> {
        config.validate()?;
        let seed = opts.seed.unwrap_or(config.seed);
        let out_dir = opts
            .out
            .clone()
            .or_else(|| config.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("results").join(&config.name));
        let store = Store::new(cache_root(&out_dir));
        let plan = plan(&config, seed);
        Ok(Self {
            config,
            seed,
            out_dir,
            store,
            force: opts.force,
            plan,
        })
    }

    pub fn from_path(path: &Path, opts: RunOptions) -> Result<Self, HarnessError> {
        Self::new(ExperimentConfig::from_path(path)?, opts)
    }

    pub fn with_store(mut self, store: Store) -> Self {
        self.store = store;
        self
    }

    fn manifest_path(&self) -> PathBuf {
        self.out_dir.join("manifest.json")
    }

    fn update_manifest(
        &self,
        stage: &str,
        started: Instant,
        edit: impl FnOnce(&mut RunManifest) -> Result<(), HarnessError>,
    ) -> Result<(), HarnessError> {
        let path = self.manifest_path();
        let mut m = RunManifest::load_or_default(&path)?;
        let digest = json_digest(&self.config);
        if m.config_digest != digest || m.master_seed != self.seed {
            m = RunManifest::default();
        }
        m.name = self.config.name.clone();
        m.config_digest = digest;
        m.code_version = CODE_VERSION.into();
        m.master_seed = self.seed;
        m.stage_seeds = self.plan.stage_seeds.clone();
        m.notes = self.run_notes();
        edit(&mut m)?;
        m.wall_clock_seconds
            .insert(stage.into(), started.elapsed().as_secs_f64());
        m.save(&path)
    }

    fn run_notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.config.dataset.family == FamilyName::ColoredDigits {
            notes.push("sampled digit colours are clipped to [0, 1] per channel".to_string());
        }
        if let Some(vae) = &self.config.vae {
            notes.push(format!(
                "VAE hyperparameters are engineering defaults, not published values: {}",
                serde_json::to_string(vae).unwrap_or_default()
            ));
        }
        notes
    }

    /// Dataset of sweep cell `cell`.
    pub fn dataset(&self, cell: usize, split: Split) -> Result<Dataset, HarnessError> {
        let job = self
            .plan
            .datasets
            .get(cell)
            .filter(|j| j.dummy.is_none())
            .ok_or_else(|| HarnessError::Config(format!("no sweep cell {cell}")))?;
        self.store.load_dataset(&job.key, split)
    }

    /// Trained classifier of architecture `arch` on sweep cell `cell`.
    pub fn classifier(&self, cell: usize, arch: usize) -> Result<Classifier, HarnessError> {
        let n_arch = self.config.classifier.len();
        let &(_, job) = self
            .plan
            .grid
            .get(cell * n_arch + arch)
            .filter(|_| arch < n_arch)
            .ok_or_else(|| HarnessError::Config(format!("no classifier ({cell}, {arch}) in the grid")))?;
        self.store.load_classifier(&self.plan.classifiers[job].key)
    }

    /// Trained VAE of sweep cell `cell`.
    pub fn vae(&self, cell: usize) -> Result<ConditionalVae, HarnessError> {
        let job = self
            .plan
            .cell_vaes
            .get(cell)
            .copied()
            .flatten()
            .ok_or_else(|| HarnessError::Config(format!("no VAE planned for cell {cell}")))?;
        self.store.load_vae(&self.plan.vaes[job].key)
    }

    /// Sweep cells in grid order.
    pub fn cells(&self) -> Vec<Cell> {
        self.config.cells()
    }

    /// Write every dataset the config needs, reusing cached ones.
    pub fn generate(&self) -> Result<StageOutcome, HarnessError> {
        let started = Instant::now();
        let mut outcome = StageOutcome::default();
        for job in &self.plan.datasets {
            if self.store.has_dataset(&job.key) && !self.force {
                log::info!("dataset {} ({}) cached", job.name, job.key);
                outcome.reused.push(job.key.clone());
                continue;
            }
            log::info!("generating dataset {} ({})", job.name, job.key);
            let (train, test) = dataset_from_job(job)?;
            self.store.save_dataset(&job.key, &train, &test)?;
            outcome.built.push(job.key.clone());
        }
        self.update_manifest("generate", started, |m| {
            for job in &self.plan.datasets {
                for split in [Split::Train, Split::Test] {
                    let path = self.store.dataset_manifest(&job.key, split);
                    let tag = if split == Split::Train { "train" } else { "test" };
                    m.artifacts
                        .insert(format!("dataset/{}/{tag}", job.name), ArtifactEntry::of(&path)?);
                }
            }
            Ok(())
        })?;
        Ok(outcome)
    }

    fn train_set(&self, dataset: usize) -> Result<Dataset, HarnessError> {
        self.store
            .load_dataset(&self.plan.datasets[dataset].key, Split::Train)
    }

    /// Train every missing checkpoint of `stage`.
    pub fn train(&self, stage: TrainStage) -> Result<StageOutcome, HarnessError> {
        let mut outcome = StageOutcome::default();
        if matches!(stage, TrainStage::Classifier | TrainStage::All) {
            let started = Instant::now();
            let mut metrics = BTreeMap::new();
            let mut cache: Option<(usize, Dataset)> = None;
            for job in &self.plan.classifiers {
                let path = self.store.model_path("classifier", &job.key);
                if path.is_file() && !self.force {
                    outcome.reused.push(job.key.clone());
                    continue;
                }
                if cache.as_ref().map(|c| c.0) != Some(job.dataset) {
                    cache = Some((job.dataset, self.train_set(job.dataset)?));
                }
                let mut train = cache.as_ref().unwrap().1.clone();
                if let Some(n) = job.section.train_limit {
                    train.records.truncate(n);
                }
                let cfg = job
                    .section
                    .to_config(train.input_dim(), train.n_classes, job.seed);
                log::info!(
                    "training classifier {} ({}) on {} records",
                    job.name,
                    job.key,
                    train.len()
                );
                let clf = train_classifier(&train, &cfg)?;
                let acc = clf.history.final_accuracy().unwrap_or(0.0);
                log::info!("classifier {} final training accuracy {acc:.4}", job.name);
                metrics.insert(job.name.clone(), json!({ "train_accuracy": acc }));
                self.store
                    .save_model("classifier", &job.key, &SavedModel::Classifier(clf))?;
                outcome.built.push(job.key.clone());
            }
            self.update_manifest("train_classifier", started, |m| {
                for job in &self.plan.classifiers {
                    let path = self.store.model_path("classifier", &job.key);
                    if path.is_file() {
                        m.artifacts
                            .insert(format!("classifier/{}", job.name), ArtifactEntry::of(&path)?);
                    }
                }
                m.metrics.extend(metrics);
                Ok(())
            })?;
        }
        if matches!(stage, TrainStage::Vae | TrainStage::All) {
            let started = Instant::now();
            let mut metrics = BTreeMap::new();
            for job in &self.plan.vaes {
                let path = self.store.model_path("vae", &job.key);
                if path.is_file() && !self.force {
                    outcome.reused.push(job.key.clone());
                    continue;
                }
                let train = self.train_set(job.dataset)?;
                log::info!(
                    "training VAE {} ({}) conditioned on {:?}",
                    job.name,
                    job.key,
                    job.config.concept_axis
                );
                let vae = train_cvae(&train, &job.config)?;
                log::info!(
                    "VAE {} reconstruction MAE {:.4}",
                    job.name,
                    vae.history.reconstruction_mae
                );
                metrics.insert(
                    job.name.clone(),
                    json!({"reconstruction_mae": vae.history.reconstruction_mae}),
                );
                self.store.save_model("vae", &job.key, &SavedModel::Vae(vae))?;
                outcome.built.push(job.key.clone());
            }
            self.update_manifest("train_vae", started, |m| {
                for job in &self.plan.vaes {
                    let path = self.store.model_path("vae", &job.key);
                    if path.is_file() {
                        m.artifacts
                            .insert(format!("vae/{}", job.name), ArtifactEntry::of(&path)?);
                    }
                }
                m.metrics.extend(metrics);
                Ok(())
            })?;
        }
        Ok(outcome)
    }

    fn spec_for(&self, test: &Dataset) -> ConceptSpec {
        let est = self.config.estimators.as_ref();
        if test.n_concept_values == 2 {
            ConceptSpec::binary(ConceptAxis::Primary, est.map_or(0, |e| e.present))
        } else {
            ConceptSpec::nway(
                ConceptAxis::Primary,
                test.n_concept_values,
                est.map(|e| e.nway_divisor).unwrap_or_default(),
            )
        }
    }

    /// Run every configured estimator on every (dataset, classifier) cell.
    pub fn estimate(&self) -> Result<EstimateOutcome, HarnessError> {
        let started = Instant::now();
        let est = self
            .config
            .estimators
            .as_ref()
            .ok_or_else(|| HarnessError::Config("estimators: section missing".into()))?;
        let cells = self.cells();
        let est_seed = self.plan.stage_seeds["estimator"];
        let mut rows = Vec::new();
        let mut loaded: Option<(usize, Dataset, Option<ConditionalVae>)> = None;
        for &(d, c) in &self.plan.grid {
            let job = &self.plan.classifiers[c];
            if loaded.as_ref().map(|l| l.0) != Some(d) {
                let test = self.store.load_dataset(&self.plan.datasets[d].key, Split::Test)?;
                let vae = match self.plan.cell_vaes[d] {
                    Some(v) => Some(self.store.load_vae(&self.plan.vaes[v].key)?),
                    None => None,
                };
                loaded = Some((d, test, vae));
            }
            let (_, test, vae) = loaded.as_ref().unwrap();
            let clf = self.store.load_classifier(&job.key)?;
            let spec = self.spec_for(test);
            let cell = &cells[d];
            for &estimator in &est.run {
                let order = rows.len();
                let seed = mix_seed(est_seed, order as u64);
                let base = ResultRow {
                    cell_order: order,
                    run_id: format!("{}/{}/{}", self.config.name, job.name, estimator.name()),
                    dataset: format!("{}@{}", family_tag(&cell.family), &self.plan.datasets[d].key[..8]),
                    bias_or_sigma: cell.label.clone(),
                    classifier_arch: clf.config.arch_tag(),
                    estimator: estimator.name().into(),
                    class0_effect: None,
                    summary: None,
                    n_samples: 0,
                    stderr: None,
                    seed: None,
                    pass_fail: None,
                    error: None,
                    detail: serde_json::Value::Null,
                };
                let row = match self.run_estimator(estimator, &clf, test, vae.as_ref(), &spec, seed) {
                    Ok(filled) => filled(base),
                    Err(e) => {
                        log::warn!("{}: {e}", base.run_id);
                        ResultRow {
                            pass_fail: Some("error".into()),
                            error: Some(e.to_string()),
                            ..base
                        }
                    }
                };
                rows.push(row);
            }
        }
        write_jsonl(&rows, &self.out_dir.join("estimates.jsonl"))?;
        let table = self.write_outputs()?;
        self.update_manifest("estimate", started, |m| self.record_reports(m))?;
        Ok(EstimateOutcome { rows, table })
    }

    fn run_estimator(
        &self,
        estimator: Estimator,
        clf: &Classifier,
        test: &Dataset,
        vae: Option<&ConditionalVae>,
        spec: &ConceptSpec,
        seed: u64,
    ) -> Result<Box<dyn FnOnce(ResultRow) -> ResultRow>, HarnessError> {
        let est = self.config.estimators.as_ref().expect("checked by caller");
        let need_vae =
            || vae.ok_or_else(|| HarnessError::Config(format!("{} needs a [vae] section", estimator.name())));
        let from_report = |r: CaceReport, seed: Option<u64>| {
            move |base: ResultRow| ResultRow {
                class0_effect: Some(r.class0_effect()),
                summary: Some(r.summary),
                n_samples: r.n_samples,
                stderr: Some(r.stderr),
                seed,
                detail: serde_json::to_value(&r).unwrap_or_default(),
                ..base
            }
        };
        let filled: Box<dyn FnOnce(ResultRow) -> ResultRow> = match estimator {
            Estimator::Gt => Box::new(from_report(gt_cace(test, clf, spec)?, None)),
            Estimator::ConExp => Box::new(from_report(conexp(clf, test, spec)?, None)),
            Estimator::Dec => Box::new(from_report(
                dec_cace(
                    need_vae()?,
                    clf,
                    spec,
                    est.n_samples,
                    &test.class_frequencies(),
                    seed,
                )?,
                Some(seed),
            )),
            Estimator::EncDec => Box::new(from_report(
                encdec_cace(need_vae()?, clf, &test.records, spec, est.posterior_samples, seed)?,
                Some(seed),
            )),
            Estimator::Tcav => {
                // Binary concepts: the present value against class 0. N-way:
                // each class against its most frequent concept value.
                let targets: Vec<(usize, ConceptSpec)> = if spec.is_binary() {
                    vec![(0, *spec)]
                } else {
                    let counts = test.joint_counts();
                    (0..test.n_classes)
                        .map(|t| {
                            let mode = (0..test.n_concept_values)
                                .max_by_key(|&v| (counts[t][v], std::cmp::Reverse(v)))
                                .unwrap_or(0);
                            (
                                t,
                                ConceptSpec {
                                    present: mode,
                                    ..*spec
                                },
                            )
                        })
                        .collect()
                };
                let reports = targets
                    .iter()
                    .map(|(t, s)| tcav_score(clf, est.tcav_layer, test, s, *t))
                    .collect::<Result<Vec<_>, _>>()?;
                let mean = reports.iter().map(|r| r.score).sum::<f64>() / reports.len() as f64;
                let n: usize = reports.iter().map(|r| r.n_examples).sum();
                let first = reports[0].score;
                Box::new(move |base: ResultRow| ResultRow {
                    class0_effect: Some(first),
                    summary: Some(mean),
                    n_samples: n,
                    detail: serde_json::to_value(&reports).unwrap_or_default(),
                    ..base
                })
            }
        };
        Ok(filled)
    }

    /// Run the positive- and null-effect tests on the diagnostics cell.
    pub fn diagnose(&self) -> Result<DiagnoseOutcome, HarnessError> {
        let started = Instant::now();
        let diag = self
            .config
            .diagnostics
            .as_ref()
            .ok_or_else(|| HarnessError::Config("diagnostics: section missing".into()))?;
        let p = self.plan.diagnostics.as_ref().expect("planned with the section");
        let job = &self.plan.datasets[p.dataset];
        let test = self.store.load_dataset(&job.key, Split::Test)?;
        let clf = self
            .store
            .load_classifier(&self.plan.classifiers[p.classifier].key)?;
        let load_vae = |v: Option<usize>| -> Result<Option<ConditionalVae>, HarnessError> {
            v.map(|i| self.store.load_vae(&self.plan.vaes[i].key)).transpose()
        };
        let (label_vae, dummy_vae) = (load_vae(p.label_vae)?, load_vae(p.dummy_vae)?);
        let est = self.config.estimators.as_ref();
        let base_cfg = DiagnosticConfig {
            estimator: diag.estimator,
            threshold: None,
            divisor: est.map(|e| e.nway_divisor).unwrap_or_default(),
            n_samples: est.map_or(4000, |e| e.n_samples),
            posterior_samples: est.map_or(1, |e| e.posterior_samples),
            seed: self.plan.stage_seeds["diagnostics"],
        };
        fn as_gen(v: &Option<ConditionalVae>) -> Option<&dyn GeneratorOracle> {
            v.as_ref().map(|m| m as &dyn GeneratorOracle)
        }
        let results = [
            (
                "positive_effect",
                positive_effect_test(
                    as_gen(&label_vae),
                    &clf,
                    &test,
                    &DiagnosticConfig {
                        threshold: diag.positive_threshold,
                        ..base_cfg.clone()
                    },
                ),
            ),
            (
                "null_effect",
                null_effect_test(
                    as_gen(&dummy_vae),
                    &clf,
                    &test,
                    &DiagnosticConfig {
                        threshold: diag.null_threshold,
                        ..base_cfg.clone()
                    },
                ),
            ),
        ];
        let mut rows = Vec::new();
        let mut reports = Vec::new();
        let mut all_passed = true;
        for (order, (name, result)) in results.into_iter().enumerate() {
            let base = ResultRow {
                cell_order: order,
                run_id: format!("{}/diag/{name}", self.config.name),
                dataset: format!("{}@{}", family_tag(&job.cell.family), &job.key[..8]),
                bias_or_sigma: job.cell.label.clone(),
                classifier_arch: clf.config.arch_tag(),
                estimator: name.into(),
                class0_effect: None,
                summary: None,
                n_samples: 0,
                stderr: None,
                seed: None,
                pass_fail: Some("error".into()),
                error: None,
                detail: serde_json::Value::Null,
            };
            rows.push(match result {
                Ok(r) => {
                    all_passed &= r.passed;
                    let row = ResultRow {
                        class0_effect: Some(r.report.class0_effect()),
                        summary: Some(r.value),
                        n_samples: r.report.n_samples,
                        stderr: Some(r.report.stderr),
                        seed: r.report.seed,
                        pass_fail: Some(if r.passed { "pass" } else { "fail" }.into()),
                        detail: serde_json::to_value(&r)?,
                        ..base
                    };
                    reports.push(r);
                    row
                }
                Err(e) => {
                    all_passed = false;
                    ResultRow {
                        error: Some(e.to_string()),
                        ..base
                    }
                }
            });
        }
        write_jsonl(&rows, &self.out_dir.join("diagnostics.jsonl"))?;
        let table = self.write_outputs()?;
        self.update_manifest("diagnose", started, |m| self.record_reports(m))?;
        Ok(DiagnoseOutcome {
            rows,
            reports,
            all_passed,
            table,
        })
    }

    /// All rows written so far: estimates first, then diagnostics.
    pub fn collected_rows(&self) -> Result<Vec<ResultRow>, HarnessError> {
        let mut rows = read_jsonl(&self.out_dir.join("estimates.jsonl"))?;
        rows.extend(read_jsonl(&self.out_dir.join("diagnostics.jsonl"))?);
        Ok(rows)
    }

    fn sweep_header(&self) -> &'static str {
        match self.config.dataset.family {
            FamilyName::Bars => "bias",
            FamilyName::ColoredDigits => "sigma",
        }
    }

    /// Rewrite `results.csv`, `results.jsonl` and `table.txt` from the
    /// collected rows. Returns the table.
    pub fn write_outputs(&self) -> Result<String, HarnessError> {
        std::fs::create_dir_all(&self.out_dir)?;
        let rows = self.collected_rows()?;
        write_csv(&rows, &self.results_csv())?;
        write_jsonl(&rows, &self.out_dir.join("results.jsonl"))?;
        let table = render_table(&self.config.name, self.sweep_header(), &rows);
        std::fs::write(self.out_dir.join("table.txt"), &table)?;
        Ok(table)
    }

    pub fn results_csv(&self) -> PathBuf {
        self.out_dir.join("results.csv")
    }

    fn record_reports(&self, m: &mut RunManifest) -> Result<(), HarnessError> {
        for name in ["results.csv", "results.jsonl", "table.txt"] {
            m.reports
                .insert(name.into(), ArtifactEntry::of(&self.out_dir.join(name))?);
        }
        Ok(())
    }

    /// Re-render the outputs from the stored rows.
    pub fn report(&self) -> Result<String, HarnessError> {
        let started = Instant::now();
        if self.collected_rows()?.is_empty() {
            return Err(HarnessError::MissingArtifact(format!(
                "no results under {}; run `estimate` or `diagnose` first",
                self.out_dir.display()
            )));
        }
        let table = self.write_outputs()?;
        self.update_manifest("report", started, |m| self.record_reports(m))?;
        Ok(table)
    }

    /// generate, train everything, then estimate and/or diagnose.
    pub fn run_all(&self) -> Result<(Option<EstimateOutcome>, Option<DiagnoseOutcome>), HarnessError> {
        self.generate()?;
        self.train(TrainStage::All)?;
        let e = self
            .config
            .estimators
            .is_some()
            .then(|| self.estimate())
            .transpose()?;
        let d = self
            .config
            .diagnostics
            .is_some()
            .then(|| self.diagnose())
            .transpose()?;
        Ok((e, d))
    }
}

/// Size rayon's global pool. Only the first call has an effect.
pub fn set_jobs(jobs: usize) {
    if jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
}
