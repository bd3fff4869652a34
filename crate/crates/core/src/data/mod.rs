//! Synthetic datasets with fully controlled generation and exact
//! interventional oracles.
//!
//! Every [`LabeledImage`] carries the latent factors it was rendered from
//! ([`GenerationRecord`]), so a counterfactual for any concept value is a
//! re-render of the same record with one factor changed.

mod bars;
mod digits;
mod dummy;
mod export;
mod glyphs;
mod idx;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub use bars::{generate_bars, intervene_bars, BarsConfig, BAR_COLORS};
pub use digits::{
    default_palette, generate_colored_digits, intervene_color, nearest_palette_index, ColoredDigitsConfig,
    DigitSource, PALETTE_SIZE,
};
pub use dummy::{add_dummy_concept, MARKER_SIZE};
pub use export::{load_dataset, save_dataset, DatasetManifest, DATASET_FORMAT_VERSION};
pub use glyphs::{GLYPH_COLS, GLYPH_ROWS, N_GLYPHS};
pub(crate) mod glyphs_internal {
    pub(crate) use super::glyphs::{glyph_intensity, MAX_SHIFT};
}
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IdxImages};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("IDX parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("concept value {value} is out of range for an axis with {n_values} values")]
    UnknownConcept { value: usize, n_values: usize },
    #[error("record does not belong to the {expected} family")]
    FamilyMismatch { expected: &'static str },
    #[error("unsupported intervention: {0}")]
    Unsupported(String),
    #[error("dataset artifact corrupted: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tensor(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which concept an estimator intervenes on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptAxis {
    /// The dataset's own concept (bar colour, digit colour).
    Primary,
    /// The binary corner-marker concept added by [`add_dummy_concept`].
    Dummy,
    /// The class label itself, treated as a concept.
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// How a digit's intensity map is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigitShape {
    /// Built-in glyph for the record's class, translated by `(dy, dx)`.
    Glyph { dy: i32, dx: i32 },
    /// Raw intensity bytes from an IDX file (value / 255).
    Raster {
        rows: usize,
        cols: usize,
        bytes: Vec<u8>,
    },
}

/// Latent factors other than class and concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationRecord {
    /// Full-extent bar; orientation follows the class, colour the concept.
    Bar { offset: usize, thickness: usize },
    /// Digit tinted by `color` scaled by intensity.
    Digit { shape: DigitShape, color: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `(channels, height, width)`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub class_label: usize,
    pub concept_label: usize,
    /// Marker presence, when the dataset carries a dummy concept.
    pub marker: Option<bool>,
    pub record: GenerationRecord,
}

impl LabeledImage {
    pub fn axis_value(&self, axis: ConceptAxis) -> Option<usize> {
        match axis {
            ConceptAxis::Primary => Some(self.concept_label),
            ConceptAxis::Label => Some(self.class_label),
            ConceptAxis::Dummy => self.marker.map(usize::from),
        }
    }

    pub fn family(&self) -> &'static str {
        match self.record {
            GenerationRecord::Bar { .. } => "bars",
            GenerationRecord::Digit { .. } => "colored_digits",
        }
    }
}

/// Generator configuration a dataset was produced from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DatasetFamily {
    Bars(BarsConfig),
    ColoredDigits(ColoredDigitsConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub family: DatasetFamily,
    pub split: Split,
    pub seed: u64,
    /// `(p, seed)` of the dummy-concept augmentation, if applied.
    pub dummy: Option<(f64, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<LabeledImage>,
    pub n_classes: usize,
    pub n_concept_values: usize,
    /// `(channels, height, width)`.
    pub image_shape: [usize; 3],
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn n_values(&self, axis: ConceptAxis) -> Option<usize> {
        match axis {
            ConceptAxis::Primary => Some(self.n_concept_values),
            ConceptAxis::Label => Some(self.n_classes),
            ConceptAxis::Dummy => self.provenance.dummy.map(|_| 2),
        }
    }

    /// Fraction of records in each class.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_classes];
        for r in &self.records {
            counts[r.class_label] += 1;
        }
        let n = self.records.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    /// `counts[class][concept]`.
    pub fn joint_counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0usize; self.n_concept_values]; self.n_classes];
        for r in &self.records {
            counts[r.class_label][r.concept_label] += 1;
        }
        counts
    }

    /// Largest |z| between each class's empirical concept frequencies and
    /// `expected[class][concept]`, using binomial standard errors.
    pub fn max_bias_z_score(&self, expected: &[Vec<f64>]) -> f64 {
        let counts = self.joint_counts();
        let mut worst: f64 = 0.0;
        for (class_counts, probs) in counts.iter().zip(expected) {
            let n: usize = class_counts.iter().sum();
            if n == 0 {
                continue;
            }
            for (&c, &p) in class_counts.iter().zip(probs) {
                let freq = c as f64 / n as f64;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                let z = if se > 0.0 {
                    (freq - p).abs() / se
                } else if (freq - p).abs() > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                worst = worst.max(z);
            }
        }
        worst
    }

    /// Exact counterfactual for `record` with `axis` set to `value`.
    pub fn intervene(
        &self,
        record: &LabeledImage,
        axis: ConceptAxis,
        value: usize,
    ) -> Result<LabeledImage, DataError> {
        intervene(record, axis, value, &self.provenance.family)
    }
}

/// Exact counterfactual of `record` under `do(axis = value)`, holding every
/// other generation factor fixed.
pub fn intervene(
    record: &LabeledImage,
    axis: ConceptAxis,
    value: usize,
    family: &DatasetFamily,
) -> Result<LabeledImage, DataError> {
    match (family, &record.record) {
        (DatasetFamily::Bars(cfg), GenerationRecord::Bar { .. }) => {
            bars::intervene_axis(record, axis, value, cfg)
        }
        (DatasetFamily::ColoredDigits(cfg), GenerationRecord::Digit { .. }) => {
            digits::intervene_axis(record, axis, value, cfg)
        }
        (DatasetFamily::Bars(_), _) => Err(DataError::FamilyMismatch { expected: "bars" }),
        (DatasetFamily::ColoredDigits(_), _) => Err(DataError::FamilyMismatch {
            expected: "colored_digits",
        }),
    }
}

/// Re-render a record from its labels and generation factors.
pub fn render(
    family: &DatasetFamily,
    class_label: usize,
    concept_label: usize,
    marker: Option<bool>,
    record: &GenerationRecord,
) -> Result<Tensor, DataError> {
    let mut pixels = match (family, record) {
        (DatasetFamily::Bars(cfg), GenerationRecord::Bar { offset, thickness }) => {
            bars::render_bar(cfg, class_label, concept_label, *offset, *thickness)?
        }
        (DatasetFamily::ColoredDigits(cfg), GenerationRecord::Digit { shape, color }) => {
            digits::render_digit(cfg, class_label, shape, color)?
        }
        (DatasetFamily::Bars(_), _) => return Err(DataError::FamilyMismatch { expected: "bars" }),
        (DatasetFamily::ColoredDigits(_), _) => {
            return Err(DataError::FamilyMismatch {
                expected: "colored_digits",
            })
        }
    };
    if marker == Some(true) {
        dummy::paint_marker(&mut pixels);
    }
    Ok(pixels)
}

/// Deterministic per-record generator: one ChaCha stream per record index,
/// so records can be produced in any order or in parallel.
pub(crate) fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub(crate) fn check_concept(value: usize, n_values: usize) -> Result<(), DataError> {
    if value >= n_values {
        return Err(DataError::UnknownConcept { value, n_values });
    }
    Ok(())
}
