//! Causal concept effect estimators and correlational baselines.
//!
//! Binary concepts use `f(do present) - f(do absent)`. N-way concepts use
//! the base-marginalised form: for base value `b`,
//! `sum_{a != b} (f(do a) - f(do b)) / D` with `D = N` or `N - 1`
//! (see [`NwayDivisor`]). Multi-class reports additionally carry the
//! per-unit absolute differences, whose class mean is the summary.

mod stats;
mod tcav;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{record_rng, ConceptAxis, DataError, Dataset, LabeledImage};
use crate::models::{GeneratorOracle, Latent, ModelError, Predictor};

pub use stats::{mean_abs, spearman};
pub use tcav::{tcav_score, TcavReport, MIN_CAV_ACCURACY};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid estimator configuration: {0}")]
    Config(String),
    #[error("concept value {0} does not occur in the dataset")]
    MissingConcept(usize),
    #[error("nothing to average over: {0}")]
    Empty(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Denominator of the base-marginalised N-way effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NwayDivisor {
    /// Divide by the number of concept values.
    #[default]
    N,
    /// Divide by the number of alternatives, so the result is a mean.
    NMinus1,
}

impl NwayDivisor {
    pub fn value(self, n_values: usize) -> f64 {
        match self {
            NwayDivisor::N => n_values as f64,
            NwayDivisor::NMinus1 => (n_values - 1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub axis: ConceptAxis,
    pub n_values: usize,
    /// Fixed base value for N-way effects where no factual value exists
    /// (prior samples); otherwise drawn uniformly.
    pub base: Option<usize>,
    /// Value treated as "present" for binary concepts.
    pub present: usize,
    pub divisor: NwayDivisor,
}

impl ConceptSpec {
    pub fn binary(axis: ConceptAxis, present: usize) -> Self {
        Self {
            axis,
            n_values: 2,
            base: None,
            present,
            divisor: NwayDivisor::default(),
        }
    }

    pub fn nway(axis: ConceptAxis, n_values: usize, divisor: NwayDivisor) -> Self {
        Self {
            axis,
            n_values,
            base: None,
            present: 0,
            divisor,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.n_values == 2
    }

    pub fn absent(&self) -> usize {
        1 - self.present
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.n_values < 2 {
            return Err(EstimatorError::Config("a concept needs at least 2 values".into()));
        }
        if self.present >= self.n_values || self.base.is_some_and(|b| b >= self.n_values) {
            return Err(EstimatorError::Config(format!(
                "concept values must lie in 0..{}",
                self.n_values
            )));
        }
        Ok(())
    }

    /// Largest possible multi-class summary for a perfectly label-driven
    /// classifier when the concept is the label itself.
    pub fn label_upper_limit(&self, n_classes: usize) -> f64 {
        let alternatives = (self.n_values - 1) as f64;
        // Class b moves by 1 for every alternative, each alternative class by 1 once.
        (alternatives + alternatives) / self.divisor.value(self.n_values) / n_classes as f64
    }

    /// Upper limit of the summary for this spec, for diagnostics.
    pub fn upper_limit(&self, n_classes: usize) -> f64 {
        if n_classes > 2 {
            self.label_upper_limit(n_classes)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[serde(alias = "gt_cace")]
    Gt,
    #[serde(alias = "dec_cace")]
    Dec,
    #[serde(alias = "encdec", alias = "encdec_cace")]
    EncDec,
    #[serde(alias = "conexp")]
    ConExp,
    Tcav,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::Gt,
        Estimator::Dec,
        Estimator::EncDec,
        Estimator::ConExp,
        Estimator::Tcav,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Gt => "gt_cace",
            Estimator::Dec => "dec_cace",
            Estimator::EncDec => "encdec_cace",
            Estimator::ConExp => "conexp",
            Estimator::Tcav => "tcav",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaceReport {
    pub estimator: Estimator,
    pub axis: ConceptAxis,
    /// Mean signed effect per class.
    pub effect: Vec<f64>,
    /// Mean per-unit absolute effect per class (multi-class only).
    pub abs_effect: Option<Vec<f64>>,
    /// Class-0 effect for binary classifiers, mean absolute effect otherwise.
    pub summary: f64,
    pub n_samples: usize,
    /// Standard error of `summary` across units.
    pub stderr: f64,
    pub seed: Option<u64>,
    pub warnings: Vec<String>,
}

impl CaceReport {
    pub fn class0_effect(&self) -> f64 {
        self.effect[0]
    }

    pub fn is_multiclass(&self) -> bool {
        self.effect.len() > 2
    }
}

/// Mean absolute per-class effect of a multi-class report.
pub fn multiclass_summary(report: &CaceReport) -> f64 {
    mean_abs(report.abs_effect.as_deref().unwrap_or(&report.effect))
}

/// Effect of one unit (record or prior draw).
struct UnitEffect {
    signed: Vec<f64>,
    abs: Vec<f64>,
}

/// `probs[v]` holds class probabilities under concept value `v`, or `None`
/// if that value is not available (only for correlational averages).
fn unit_effect(spec: &ConceptSpec, probs: &[Option<Vec<f64>>], base: usize) -> UnitEffect {
    if spec.is_binary() {
        let (p1, p0) = (
            probs[spec.present].as_ref().unwrap(),
            probs[spec.absent()].as_ref().unwrap(),
        );
        let signed: Vec<f64> = p1.iter().zip(p0).map(|(a, b)| a - b).collect();
        let abs = signed.iter().map(|v| v.abs()).collect();
        return UnitEffect { signed, abs };
    }
    let pb = probs[base].as_ref().unwrap();
    let available = probs.iter().filter(|p| p.is_some()).count();
    let d = spec.divisor.value(available);
    let mut signed = vec![0.0; pb.len()];
    let mut abs = vec![0.0; pb.len()];
    for (a, pa) in probs.iter().enumerate() {
        let Some(pa) = pa else { continue };
        if a == base {
            continue;
        }
        for k in 0..pb.len() {
            let diff = pa[k] - pb[k];
            signed[k] += diff / d;
            abs[k] += diff.abs() / d;
        }
    }
    UnitEffect { signed, abs }
}

fn unit_summary(u: &UnitEffect) -> f64 {
    if u.signed.len() > 2 {
        u.abs.iter().sum::<f64>() / u.abs.len() as f64
    } else {
        u.signed[0]
    }
}

fn average_units(
    estimator: Estimator,
    spec: &ConceptSpec,
    units: Vec<UnitEffect>,
    seed: Option<u64>,
) -> Result<CaceReport, EstimatorError> {
    let n = units.len();
    if n == 0 {
        return Err(EstimatorError::Empty(format!(
            "{} received no units",
            estimator.name()
        )));
    }
    let width = units[0].signed.len();
    let mut effect = vec![0.0; width];
    let mut abs = vec![0.0; width];
    for u in &units {
        for k in 0..width {
            effect[k] += u.signed[k] / n as f64;
            abs[k] += u.abs[k] / n as f64;
        }
    }
    let per_unit: Vec<f64> = units.iter().map(unit_summary).collect();
    let mean = per_unit.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = per_unit.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    let multiclass = width > 2;
    Ok(CaceReport {
        estimator,
        axis: spec.axis,
        summary: if multiclass { mean_abs_vec(&abs) } else { effect[0] },
        effect,
        abs_effect: multiclass.then_some(abs),
        n_samples: n,
        stderr,
        seed,
        warnings: Vec::new(),
    })
}

fn mean_abs_vec(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_predictor(predictor: &dyn Predictor, input_dim: usize) -> Result<(), EstimatorError> {
    if predictor.input_dim() != input_dim {
        return Err(EstimatorError::Config(format!(
            "classifier expects {} inputs, data has {}",
            predictor.input_dim(),
            input_dim
        )));
    }
    Ok(())
}

fn check_spec_against(spec: &ConceptSpec, dataset: &Dataset) -> Result<(), EstimatorError> {
    spec.validate()?;
    let n = dataset
        .n_values(spec.axis)
        .ok_or_else(|| EstimatorError::Config(format!("dataset has no {:?} concept", spec.axis)))?;
    if n != spec.n_values {
        return Err(EstimatorError::Config(format!(
            "spec has {} values but the dataset's {:?} concept has {n}",
            spec.n_values, spec.axis
        )));
    }
    Ok(())
}

/// Predict every image of a unit in one batch.
fn predict_all(
    predictor: &dyn Predictor,
    images: &[Option<Vec<f64>>],
) -> Result<Vec<Option<Vec<f64>>>, EstimatorError> {
    let present: Vec<&Vec<f64>> = images.iter().flatten().collect();
    let flat: Vec<f64> = present.iter().flat_map(|v| v.iter().copied()).collect();
    let probs = predictor.predict_batch(&flat, present.len())?;
    let k = predictor.n_classes();
    let mut rows = probs.chunks(k).map(|c| c.to_vec());
    Ok(images
        .iter()
        .map(|img| img.as_ref().map(|_| rows.next().unwrap()))
        .collect())
}

fn record_concept(record: &LabeledImage, axis: ConceptAxis) -> Result<usize, EstimatorError> {
    record
        .axis_value(axis)
        .ok_or_else(|| EstimatorError::Config(format!("record has no {axis:?} concept")))
}

/// Ground-truth effect using the dataset's exact interventional oracle,
/// averaged over `dataset`'s records.
pub fn gt_cace(
    dataset: &Dataset,
    predictor: &dyn Predictor,
    spec: &ConceptSpec,
) -> Result<CaceReport, EstimatorError> {
    check_spec_against(spec, dataset)?;
    check_predictor(predictor, dataset.input_dim())?;
    let units = dataset
        .records
        .par_iter()
        .map(|r| {
            let own = record_concept(r, spec.axis)?;
            let images = (0..spec.n_values)
                .map(|v| {
                    if v == own {
                        Ok(Some(r.pixels.data().to_vec()))
                    } else {
                        Ok(Some(dataset.intervene(r, spec.axis, v)?.pixels.into_data()))
                    }
                })
                .collect::<Result<Vec<_>, EstimatorError>>()?;
            Ok(unit_effect(spec, &predict_all(predictor, &images)?, own))
        })
        .collect::<Result<Vec<_>, EstimatorError>>()?;
    average_units(Estimator::Gt, spec, units, None)
}

fn check_generator(generator: &dyn GeneratorOracle, spec: &ConceptSpec) -> Result<(), EstimatorError> {
    spec.validate()?;
    if generator.concept_axis() != spec.axis {
        return Err(EstimatorError::Config(format!(
            "generator is conditioned on {:?}, spec asks for {:?}",
            generator.concept_axis(),
            spec.axis
        )));
    }
    if generator.n_concept_values() != spec.n_values {
        return Err(EstimatorError::Config(format!(
            "generator has {} concept values, spec has {}",
            generator.n_concept_values(),
            spec.n_values
        )));
    }
    Ok(())
}

/// Effect estimated from prior samples of a conditional generator: each
/// draw decodes the same latent under every needed concept value.
pub fn dec_cace(
    generator: &dyn GeneratorOracle,
    predictor: &dyn Predictor,
    spec: &ConceptSpec,
    n_samples: usize,
    class_weights: &[f64],
    seed: u64,
) -> Result<CaceReport, EstimatorError> {
    check_generator(generator, spec)?;
    if n_samples == 0 {
        return Err(EstimatorError::Empty("dec_cace needs at least one sample".into()));
    }
    if class_weights.len() != generator.n_classes() {
        return Err(EstimatorError::Config(
            "class_weights length must equal n_classes".into(),
        ));
    }
    let classes = WeightedIndex::new(class_weights)
        .map_err(|e| EstimatorError::Config(format!("class_weights: {e}")))?;
    let units = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = record_rng(seed, i as u64);
            let class_label = classes.sample(&mut rng);
            let z = generator.sample_prior(Some(class_label), &mut rng)?;
            let base = match spec.base {
                Some(b) => b,
                None if spec.is_binary() => spec.absent(),
                None => (rng.next_u64() % spec.n_values as u64) as usize,
            };
            let images = (0..spec.n_values)
                .map(|v| Ok(Some(generator.decode(&z, class_label, v)?)))
                .collect::<Result<Vec<_>, EstimatorError>>()?;
            Ok(unit_effect(spec, &predict_all(predictor, &images)?, base))
        })
        .collect::<Result<Vec<_>, EstimatorError>>()?;
    average_units(Estimator::Dec, spec, units, Some(seed))
}

/// Per-image effect from encoding a real image and decoding it under the
/// other concept values; the factual term uses the image itself. Averages
/// over `posterior_samples` latent draws per image.
pub fn encdec_cace(
    generator: &dyn GeneratorOracle,
    predictor: &dyn Predictor,
    images: &[LabeledImage],
    spec: &ConceptSpec,
    posterior_samples: usize,
    seed: u64,
) -> Result<CaceReport, EstimatorError> {
    check_generator(generator, spec)?;
    if images.is_empty() {
        return Err(EstimatorError::Empty(
            "encdec_cace needs at least one image".into(),
        ));
    }
    if posterior_samples == 0 {
        return Err(EstimatorError::Config(
            "posterior_samples must be positive".into(),
        ));
    }
    let units = images
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let own = record_concept(r, spec.axis)?;
            let mut rng = record_rng(seed, i as u64);
            let mut acc: Option<UnitEffect> = None;
            for _ in 0..posterior_samples {
                let z = generator.encode(r, &mut rng)?;
                let imgs = (0..spec.n_values)
                    .map(|v| {
                        if v == own {
                            Ok(Some(r.pixels.data().to_vec()))
                        } else {
                            Ok(Some(generator.decode(&z, r.class_label, v)?))
                        }
                    })
                    .collect::<Result<Vec<_>, EstimatorError>>()?;
                let u = unit_effect(spec, &predict_all(predictor, &imgs)?, own);
                acc = Some(match acc {
                    None => u,
                    Some(mut a) => {
                        for k in 0..a.signed.len() {
                            a.signed[k] += u.signed[k];
                            a.abs[k] += u.abs[k];
                        }
                        a
                    }
                });
            }
            let mut u = acc.unwrap();
            let k = posterior_samples as f64;
            u.signed.iter_mut().chain(u.abs.iter_mut()).for_each(|v| *v /= k);
            Ok(u)
        })
        .collect::<Result<Vec<_>, EstimatorError>>()?;
    average_units(Estimator::EncDec, spec, units, Some(seed))
}

fn class_probs(predictor: &dyn Predictor, dataset: &Dataset) -> Result<Vec<Vec<f64>>, EstimatorError> {
    let dim = dataset.input_dim();
    let k = predictor.n_classes();
    let chunks: Vec<&[LabeledImage]> = dataset.records.chunks(256).collect();
    let out = chunks
        .par_iter()
        .map(|chunk| {
            let mut x = Vec::with_capacity(chunk.len() * dim);
            for r in chunk.iter() {
                x.extend_from_slice(r.pixels.data());
            }
            let p = predictor.predict_batch(&x, chunk.len())?;
            Ok(p.chunks(k).map(|c| c.to_vec()).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, EstimatorError>>()?;
    Ok(out.into_iter().flatten().collect())
}

/// Conditional-expectation baseline: `E[f | C = present] - E[f | C = absent]`
/// for binary concepts. For N-way concepts each record contributes the
/// base-marginalised form with `b` its own value and `E[f | C = a]` in
/// place of `f(do a)`, over the values that occur in the dataset.
pub fn conexp(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    spec: &ConceptSpec,
) -> Result<CaceReport, EstimatorError> {
    check_spec_against(spec, dataset)?;
    check_predictor(predictor, dataset.input_dim())?;
    let probs = class_probs(predictor, dataset)?;
    let k = predictor.n_classes();
    let mut sums = vec![vec![0.0; k]; spec.n_values];
    let mut counts = vec![0usize; spec.n_values];
    let concepts: Vec<usize> = dataset
        .records
        .iter()
        .map(|r| record_concept(r, spec.axis))
        .collect::<Result<_, _>>()?;
    for (p, &c) in probs.iter().zip(&concepts) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    let means: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut warnings = Vec::new();
    if spec.is_binary() {
        for v in [spec.present, spec.absent()] {
            if counts[v] == 0 {
                return Err(EstimatorError::MissingConcept(v));
            }
        }
        let u = unit_effect(spec, &means, spec.absent());
        let summary = if k > 2 { mean_abs_vec(&u.abs) } else { u.signed[0] };
        let p1 = counts[spec.present] as f64;
        let p0 = counts[spec.absent()] as f64;
        let var = |v: usize, n: f64| {
            let m = means[v].as_ref().unwrap()[0];
            probs
                .iter()
                .zip(&concepts)
                .filter(|(_, &c)| c == v)
                .map(|(p, _)| (p[0] - m).powi(2))
                .sum::<f64>()
                / (n - 1.0).max(1.0)
        };
        let stderr = (var(spec.present, p1) / p1 + var(spec.absent(), p0) / p0).sqrt();
        return Ok(CaceReport {
            estimator: Estimator::ConExp,
            axis: spec.axis,
            effect: u.signed,
            abs_effect: (k > 2).then_some(u.abs),
            summary,
            n_samples: dataset.len(),
            stderr,
            seed: None,
            warnings,
        });
    }
    let observed = counts.iter().filter(|&&n| n > 0).count();
    if observed < 2 {
        return Err(EstimatorError::MissingConcept(
            counts.iter().position(|&n| n == 0).unwrap_or(0),
        ));
    }
    if observed < spec.n_values {
        let missing: Vec<String> = counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(v, _)| v.to_string())
            .collect();
        warnings.push(format!(
            "concept values {} never occur; averaged over the rest",
            missing.join(",")
        ));
    }
    let units = probs
        .into_iter()
        .zip(&concepts)
        .map(|(p, &c)| {
            let mut local = means.clone();
            local[c] = Some(p);
            unit_effect(spec, &local, c)
        })
        .collect();
    let mut report = average_units(Estimator::ConExp, spec, units, None)?;
    report.warnings = warnings;
    Ok(report)
}

/// Which estimator backs [`nway_pairwise_cace`].
pub enum Backend<'a> {
    Gt {
        dataset: &'a Dataset,
    },
    Dec {
        generator: &'a dyn GeneratorOracle,
        n_samples: usize,
        class_weights: &'a [f64],
        seed: u64,
    },
    EncDec {
        generator: &'a dyn GeneratorOracle,
        images: &'a [LabeledImage],
        seed: u64,
    },
}

/// `E[f | do(C = a)] - E[f | do(C = b)]` per class.
pub fn nway_pairwise_cace(
    backend: &Backend<'_>,
    predictor: &dyn Predictor,
    spec: &ConceptSpec,
    a: usize,
    b: usize,
) -> Result<CaceReport, EstimatorError> {
    spec.validate()?;
    if a == b {
        return Err(EstimatorError::Config(
            "pairwise effect needs two distinct values".into(),
        ));
    }
    if a >= spec.n_values || b >= spec.n_values {
        return Err(EstimatorError::Config(format!(
            "values must lie in 0..{}",
            spec.n_values
        )));
    }
    let pair = |pa: Vec<f64>, pb: Vec<f64>| {
        let signed: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x - y).collect();
        let abs = signed.iter().map(|v| v.abs()).collect();
        UnitEffect { signed, abs }
    };
    let predict_pair = |ia: Vec<f64>, ib: Vec<f64>| -> Result<UnitEffect, EstimatorError> {
        let mut p = predict_all(predictor, &[Some(ia), Some(ib)])?
            .into_iter()
            .flatten();
        Ok(pair(p.next().unwrap(), p.next().unwrap()))
    };
    let (estimator, units, seed) = match backend {
        Backend::Gt { dataset } => {
            check_spec_against(spec, dataset)?;
            let render = |r: &LabeledImage, v: usize| -> Result<Vec<f64>, EstimatorError> {
                if r.axis_value(spec.axis) == Some(v) {
                    Ok(r.pixels.data().to_vec())
                } else {
                    Ok(dataset.intervene(r, spec.axis, v)?.pixels.into_data())
                }
            };
            let units = dataset
                .records
                .par_iter()
                .map(|r| predict_pair(render(r, a)?, render(r, b)?))
                .collect::<Result<Vec<_>, _>>()?;
            (Estimator::Gt, units, None)
        }
        Backend::Dec {
            generator,
            n_samples,
            class_weights,
            seed,
        } => {
            check_generator(*generator, spec)?;
            if *n_samples == 0 {
                return Err(EstimatorError::Empty("need at least one sample".into()));
            }
            let classes = WeightedIndex::new(*class_weights)
                .map_err(|e| EstimatorError::Config(format!("class_weights: {e}")))?;
            let units = (0..*n_samples)
                .into_par_iter()
                .map(|i| {
                    let mut rng = record_rng(*seed, i as u64);
                    let class_label = classes.sample(&mut rng);
                    let z = generator.sample_prior(Some(class_label), &mut rng)?;
                    predict_pair(
                        generator.decode(&z, class_label, a)?,
                        generator.decode(&z, class_label, b)?,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            (Estimator::Dec, units, Some(*seed))
        }
        Backend::EncDec {
            generator,
            images,
            seed,
        } => {
            check_generator(*generator, spec)?;
            let units = images
                .par_iter()
                .enumerate()
                .map(|(i, r)| {
                    let mut rng = record_rng(*seed, i as u64);
                    let z: Latent = generator.encode(r, &mut rng)?;
                    let render = |v: usize| -> Result<Vec<f64>, EstimatorError> {
                        if r.axis_value(spec.axis) == Some(v) {
                            Ok(r.pixels.data().to_vec())
                        } else {
                            Ok(generator.decode(&z, r.class_label, v)?)
                        }
                    };
                    predict_pair(render(a)?, render(b)?)
                })
                .collect::<Result<Vec<_>, _>>()?;
            (Estimator::EncDec, units, Some(*seed))
        }
    };
    average_units(estimator, spec, units, seed)
}
