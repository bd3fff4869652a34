//! Sanity checks for a generator-backed effect estimate: a concept with a
//! known large effect (the label itself) and one with none (a dummy marker).

use serde::{Deserialize, Serialize};

use crate::data::{ConceptAxis, Dataset};
use crate::estimators::{
    dec_cace, encdec_cace, gt_cace, CaceReport, ConceptSpec, Estimator, EstimatorError, NwayDivisor,
};
use crate::models::{GeneratorOracle, Predictor};

pub const NOT_TESTABLE_NOTE: &str =
    "the disentanglement assumption is not statistically testable; these diagnostics are confidence boosters only";

pub const DEFAULT_NULL_THRESHOLD: f64 = 0.05;
/// Positive-effect threshold as a fraction of the theoretical upper limit.
pub const DEFAULT_POSITIVE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticConfig {
    /// One of `gt`, `dec`, `enc_dec`.
    pub estimator: Estimator,
    /// Overrides the default bound of the test.
    pub threshold: Option<f64>,
    pub divisor: NwayDivisor,
    pub n_samples: usize,
    pub posterior_samples: usize,
    pub seed: u64,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::EncDec,
            threshold: None,
            divisor: NwayDivisor::default(),
            n_samples: 4000,
            posterior_samples: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtLeast(f64),
    AtMost(f64),
}

impl Bound {
    pub fn holds(self, value: f64) -> bool {
        match self {
            Bound::AtLeast(t) => value >= t,
            Bound::AtMost(t) => value.abs() <= t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub test: String,
    pub estimator: Estimator,
    pub value: f64,
    pub bound: Bound,
    pub passed: bool,
    /// Largest value the positive test can reach, when defined.
    pub upper_limit: Option<f64>,
    pub report: CaceReport,
    pub notes: Vec<String>,
}

fn run_estimator(
    generator: Option<&dyn GeneratorOracle>,
    predictor: &dyn Predictor,
    dataset: &Dataset,
    spec: &ConceptSpec,
    cfg: &DiagnosticConfig,
) -> Result<CaceReport, EstimatorError> {
    let need_generator = || {
        generator.ok_or_else(|| EstimatorError::Config(format!("{} needs a generator", cfg.estimator.name())))
    };
    match cfg.estimator {
        Estimator::Gt => gt_cace(dataset, predictor, spec),
        Estimator::Dec => dec_cace(
            need_generator()?,
            predictor,
            spec,
            cfg.n_samples,
            &dataset.class_frequencies(),
            cfg.seed,
        ),
        Estimator::EncDec => encdec_cace(
            need_generator()?,
            predictor,
            &dataset.records,
            spec,
            cfg.posterior_samples,
            cfg.seed,
        ),
        other => Err(EstimatorError::Config(format!(
            "{} cannot back a diagnostic",
            other.name()
        ))),
    }
}

/// Effect of the class label itself, treated as a concept. Passes when the
/// summary reaches the threshold (default: half the upper limit).
///
/// For generator-backed estimators the generator must be conditioned on
/// [`ConceptAxis::Label`].
pub fn positive_effect_test(
    generator: Option<&dyn GeneratorOracle>,
    predictor: &dyn Predictor,
    dataset: &Dataset,
    cfg: &DiagnosticConfig,
) -> Result<DiagnosticReport, EstimatorError> {
    let spec = if dataset.n_classes == 2 {
        ConceptSpec::binary(ConceptAxis::Label, 0)
    } else {
        ConceptSpec::nway(ConceptAxis::Label, dataset.n_classes, cfg.divisor)
    };
    if let Some(g) = generator {
        if cfg.estimator != Estimator::Gt && g.concept_axis() != ConceptAxis::Label {
            return Err(EstimatorError::Config(
                "positive-effect test needs a generator conditioned on the label axis".into(),
            ));
        }
    }
    let report = run_estimator(generator, predictor, dataset, &spec, cfg)?;
    let limit = spec.upper_limit(dataset.n_classes);
    let bound = Bound::AtLeast(cfg.threshold.unwrap_or(DEFAULT_POSITIVE_FRACTION * limit));
    let value = report.summary;
    Ok(DiagnosticReport {
        test: "positive_effect".into(),
        estimator: cfg.estimator,
        value,
        bound,
        passed: bound.holds(value),
        upper_limit: Some(limit),
        report,
        notes: vec![NOT_TESTABLE_NOTE.into()],
    })
}

/// Effect of the independent corner-marker concept. Passes when
/// `|summary| <= threshold` (default 0.05).
pub fn null_effect_test(
    generator: Option<&dyn GeneratorOracle>,
    predictor: &dyn Predictor,
    dataset_with_dummy: &Dataset,
    cfg: &DiagnosticConfig,
) -> Result<DiagnosticReport, EstimatorError> {
    if dataset_with_dummy.provenance.dummy.is_none() {
        return Err(EstimatorError::Config("dataset has no dummy concept".into()));
    }
    let spec = ConceptSpec::binary(ConceptAxis::Dummy, 1);
    let report = run_estimator(generator, predictor, dataset_with_dummy, &spec, cfg)?;
    let bound = Bound::AtMost(cfg.threshold.unwrap_or(DEFAULT_NULL_THRESHOLD));
    let value = report.summary;
    Ok(DiagnosticReport {
        test: "null_effect".into(),
        estimator: cfg.estimator,
        value,
        bound,
        passed: bound.holds(value),
        upper_limit: None,
        report,
        notes: vec![NOT_TESTABLE_NOTE.into()],
    })
}
