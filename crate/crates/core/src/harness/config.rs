use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{BarsConfig, ColoredDigitsConfig, DatasetFamily};
use crate::estimators::{Estimator, NwayDivisor};
use crate::models::{Activation, ClassifierConfig, TrainingConfig, VaeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Bars,
    ColoredDigits,
}

/// `[dataset]`: the family, its base generator settings and the optional
/// dummy-concept augmentation used by the diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub family: FamilyName,
    #[serde(default)]
    pub bars: Option<BarsConfig>,
    #[serde(default)]
    pub colored_digits: Option<ColoredDigitsConfig>,
    /// Marker probability for the dummy concept.
    #[serde(default)]
    pub dummy_p: Option<f64>,
}

/// `[sweep]`: one dataset per entry. Bars take `bias` pairs
/// `[red_fraction_class0, red_fraction_class1]`, digits take `sigma`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub bias: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub sigma: Option<Vec<f64>>,
}

/// One `[[classifier]]` architecture. Input size and class count come from
/// the dataset; the seed comes from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub hidden_layer_sizes: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub training: TrainingConfig,
    /// Train on only the first `train_limit` training records.
    #[serde(default)]
    pub train_limit: Option<usize>,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ClassifierSection {
    pub fn to_config(&self, input_dim: usize, n_classes: usize, seed: u64) -> ClassifierConfig {
        let mut training = self.training.clone();
        training.seed = seed;
        ClassifierConfig {
            hidden_layer_sizes: self.hidden_layer_sizes.clone(),
            activation: self.activation,
            n_classes,
            input_dim,
            training,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub run: Vec<Estimator>,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "one")]
    pub posterior_samples: usize,
    #[serde(default)]
    pub nway_divisor: NwayDivisor,
    /// Concept value treated as "present" for binary concepts.
    #[serde(default)]
    pub present: usize,
    #[serde(default)]
    pub tcav_layer: usize,
}

fn default_n_samples() -> usize {
    4000
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "default_diag_estimator")]
    pub estimator: Estimator,
    #[serde(default)]
    pub positive_threshold: Option<f64>,
    #[serde(default)]
    pub null_threshold: Option<f64>,
    /// Sweep cell whose dataset the diagnostics run on.
    #[serde(default)]
    pub cell: usize,
}

fn default_diag_estimator() -> Estimator {
    Estimator::EncDec
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// A whole experiment grid: datasets × classifier architectures ×
/// estimators, plus optional diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub sweep: SweepSection,
    pub classifier: Vec<ClassifierSection>,
    #[serde(default)]
    pub vae: Option<VaeConfig>,
    #[serde(default)]
    pub estimators: Option<EstimatorSection>,
    #[serde(default)]
    pub diagnostics: Option<DiagnosticsSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// A sweep cell: one dataset configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub family: DatasetFamily,
    /// `0.99/0.01` or `0.02`.
    pub label: String,
}

fn bad(field: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(bad("name", "must be a non-empty file-name-safe string"));
        }
        let d = &self.dataset;
        match d.family {
            FamilyName::Bars => {
                if d.colored_digits.is_some() {
                    return Err(bad("dataset.colored_digits", "not allowed for the bars family"));
                }
                if self.sweep.sigma.is_some() {
                    return Err(bad("sweep.sigma", "bars sweep over `bias`"));
                }
                if let Some(b) = &self.sweep.bias {
                    if b.is_empty() {
                        return Err(bad("sweep.bias", "must not be empty"));
                    }
                }
            }
            FamilyName::ColoredDigits => {
                if d.bars.is_some() {
                    return Err(bad("dataset.bars", "not allowed for the colored_digits family"));
                }
                if self.sweep.bias.is_some() {
                    return Err(bad("sweep.bias", "colored digits sweep over `sigma`"));
                }
                if let Some(s) = &self.sweep.sigma {
                    if s.is_empty() {
                        return Err(bad("sweep.sigma", "must not be empty"));
                    }
                }
            }
        }
        for cell in self.cells() {
            let r = match &cell.family {
                DatasetFamily::Bars(c) => c.validate(),
                DatasetFamily::ColoredDigits(c) => c.validate(),
            };
            r.map_err(|e| bad(&format!("dataset (sweep cell {})", cell.index), e))?;
        }
        if let Some(p) = d.dummy_p {
            if !(0.0..=1.0).contains(&p) {
                return Err(bad("dataset.dummy_p", format!("must lie in [0, 1], got {p}")));
            }
        }
        if self.classifier.is_empty() {
            return Err(bad("classifier", "at least one architecture is required"));
        }
        for (i, c) in self.classifier.iter().enumerate() {
            c.to_config(1, 2, 0)
                .validate()
                .map_err(|e| bad(&format!("classifier[{i}]"), e))?;
            if c.train_limit == Some(0) {
                return Err(bad(&format!("classifier[{i}].train_limit"), "must be positive"));
            }
        }
        if let Some(v) = &self.vae {
            v.validate().map_err(|e| bad("vae", e))?;
        }
        if let Some(e) = &self.estimators {
            if e.run.is_empty() {
                return Err(bad("estimators.run", "must name at least one estimator"));
            }
            if e.n_samples == 0 || e.posterior_samples == 0 {
                return Err(bad(
                    "estimators",
                    "n_samples and posterior_samples must be positive",
                ));
            }
            if e.run.iter().any(|x| matches!(x, Estimator::Tcav)) {
                for (i, c) in self.classifier.iter().enumerate() {
                    if e.tcav_layer >= c.hidden_layer_sizes.len() {
                        return Err(bad(
                            "estimators.tcav_layer",
                            format!(
                                "classifier[{i}] has only {} hidden layers",
                                c.hidden_layer_sizes.len()
                            ),
                        ));
                    }
                }
            }
        }
        if let Some(diag) = &self.diagnostics {
            if !matches!(diag.estimator, Estimator::Gt | Estimator::Dec | Estimator::EncDec) {
                return Err(bad("diagnostics.estimator", "must be gt, dec or enc_dec"));
            }
            if d.dummy_p.is_none() {
                return Err(bad("dataset.dummy_p", "required by the null-effect diagnostic"));
            }
            if diag.estimator != Estimator::Gt && self.vae.is_none() {
                return Err(bad("vae", "required by generator-backed diagnostics"));
            }
            if diag.cell >= self.cells().len() {
                return Err(bad("diagnostics.cell", "out of range of the sweep"));
            }
        }
        if self.estimators.is_none() && self.diagnostics.is_none() {
            return Err(bad(
                "estimators",
                "nothing to run: add [estimators] or [diagnostics]",
            ));
        }
        Ok(())
    }

    /// Dataset configurations of the sweep, seeds not yet applied.
    pub fn cells(&self) -> Vec<Cell> {
        match self.dataset.family {
            FamilyName::Bars => {
                let base = self.dataset.bars.clone().unwrap_or_default();
                let biases = self
                    .sweep
                    .bias
                    .clone()
                    .unwrap_or_else(|| vec![[base.red_fraction_class0, base.red_fraction_class1]]);
                biases
                    .into_iter()
                    .enumerate()
                    .map(|(index, [a, b])| Cell {
                        index,
                        family: DatasetFamily::Bars(BarsConfig {
                            red_fraction_class0: a,
                            red_fraction_class1: b,
                            ..base.clone()
                        }),
                        label: format!("{a}/{b}"),
                    })
                    .collect()
            }
            FamilyName::ColoredDigits => {
                let base = self.dataset.colored_digits.clone().unwrap_or_default();
                let sigmas = self.sweep.sigma.clone().unwrap_or_else(|| vec![base.sigma]);
                sigmas
                    .into_iter()
                    .enumerate()
                    .map(|(index, sigma)| Cell {
                        index,
                        family: DatasetFamily::ColoredDigits(ColoredDigitsConfig {
                            sigma,
                            ..base.clone()
                        }),
                        label: format!("{sigma}"),
                    })
                    .collect()
            }
        }
    }

    pub fn needs_vae(&self) -> bool {
        self.estimators.as_ref().is_some_and(|e| {
            e.run
                .iter()
                .any(|x| matches!(x, Estimator::Dec | Estimator::EncDec))
        })
    }
}
