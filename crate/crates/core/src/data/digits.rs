use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::glyphs::{glyph_intensity, CANVAS, MAX_SHIFT, N_GLYPHS};
use super::idx::load_idx;
use super::{
    check_concept, record_rng, render, ConceptAxis, DataError, Dataset, DatasetFamily, DatasetSplits,
    DigitShape, GenerationRecord, LabeledImage, Provenance, Split,
};
use crate::autodiff::Tensor;

/// Where the digit shapes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DigitSource {
    /// Built-in 16x16 glyphs, randomly translated by up to 2 px.
    SyntheticGlyphs,
    /// IDX image/label files; the first `n_train` records form the training
    /// split and the next `n_test` the test split.
    Idx { images: PathBuf, labels: PathBuf },
}

/// The 7 non-black corners of the RGB cube followed by its 6 face
/// centres. Minimum pairwise distance is `sqrt(0.5)`.
pub fn default_palette() -> Vec<[f64; 3]> {
    vec![
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 1.0],
        [0.5, 0.5, 0.0],
        [0.5, 0.0, 0.5],
        [0.0, 0.5, 0.5],
        [1.0, 0.5, 0.5],
        [0.5, 1.0, 0.5],
        [0.5, 0.5, 1.0],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColoredDigitsConfig {
    /// Per-channel standard deviation of the sampled colour.
    pub sigma: f64,
    pub palette: Vec<[f64; 3]>,
    /// Palette index used as the mean colour of each class.
    pub class_colors: Vec<usize>,
    pub source: DigitSource,
    /// Number of classes; at most 10.
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for ColoredDigitsConfig {
    fn default() -> Self {
        Self {
            sigma: 0.02,
            palette: default_palette(),
            class_colors: (0..N_GLYPHS).collect(),
            source: DigitSource::SyntheticGlyphs,
            n_classes: N_GLYPHS,
            n_train: 10_000,
            n_test: 2_000,
            seed: 0,
        }
    }
}

pub const PALETTE_SIZE: usize = 13;

impl ColoredDigitsConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(DataError::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.palette.len() != PALETTE_SIZE {
            return Err(DataError::Config(format!(
                "palette must have {PALETTE_SIZE} colours, got {}",
                self.palette.len()
            )));
        }
        if self.palette.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(DataError::Config("palette channels must lie in [0, 1]".into()));
        }
        if self.n_classes < 2 || self.n_classes > N_GLYPHS {
            return Err(DataError::Config(format!(
                "n_classes must be in 2..={N_GLYPHS}, got {}",
                self.n_classes
            )));
        }
        if self.class_colors.len() < self.n_classes || self.class_colors.iter().any(|&i| i >= PALETTE_SIZE) {
            return Err(DataError::Config(
                "class_colors must map every class to a palette index".into(),
            ));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(DataError::Config("n_train and n_test must be positive".into()));
        }
        Ok(())
    }
}

/// Index of the palette colour closest to `color` in Euclidean distance.
pub fn nearest_palette_index(palette: &[[f64; 3]], color: &[f64; 3]) -> usize {
    palette
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d: f64 = p.iter().zip(color).map(|(a, b)| (a - b).powi(2)).sum();
            (i, d)
        })
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
        .0
}

pub(crate) fn render_digit(
    cfg: &ColoredDigitsConfig,
    class_label: usize,
    shape: &DigitShape,
    color: &[f64; 3],
) -> Result<Tensor, DataError> {
    let (rows, cols, intensity) = match shape {
        DigitShape::Glyph { dy, dx } => {
            check_concept(class_label, cfg.n_classes)?;
            if dy.abs() > MAX_SHIFT || dx.abs() > MAX_SHIFT {
                return Err(DataError::Config(format!(
                    "glyph shift ({dy}, {dx}) out of range"
                )));
            }
            (CANVAS, CANVAS, glyph_intensity(class_label, *dy, *dx))
        }
        DigitShape::Raster { rows, cols, bytes } => {
            (*rows, *cols, bytes.iter().map(|&b| b as f64 / 255.0).collect())
        }
    };
    let plane = rows * cols;
    let mut data = vec![0.0; 3 * plane];
    for (c, &tint) in color.iter().enumerate() {
        for (o, &v) in data[c * plane..(c + 1) * plane].iter_mut().zip(&intensity) {
            *o = v * tint;
        }
    }
    Ok(Tensor::new(vec![3, rows, cols], data)?)
}

fn sample_color<R: Rng>(cfg: &ColoredDigitsConfig, class_label: usize, rng: &mut R) -> [f64; 3] {
    let mean = cfg.palette[cfg.class_colors[class_label]];
    let mut color = [0.0; 3];
    for (c, m) in color.iter_mut().zip(mean) {
        let eps: f64 = rng.sample(StandardNormal);
        *c = (m + cfg.sigma * eps).clamp(0.0, 1.0);
    }
    color
}

/// Colour-biased digits: each class's colour is drawn around that class's
/// palette colour, and the concept is the nearest palette index.
///
/// Noise draws depend only on `(seed, record index)`, so datasets that differ
/// only in `sigma` share every shape and every standardised colour draw.
pub fn generate_colored_digits(config: &ColoredDigitsConfig) -> Result<DatasetSplits, DataError> {
    config.validate()?;
    let family = DatasetFamily::ColoredDigits(config.clone());
    let idx = match &config.source {
        DigitSource::SyntheticGlyphs => None,
        DigitSource::Idx { images, labels } => {
            let data = load_idx(images, labels)?;
            if data.len() < config.n_train + config.n_test {
                return Err(DataError::Config(format!(
                    "IDX source has {} images, need {}",
                    data.len(),
                    config.n_train + config.n_test
                )));
            }
            if config.n_classes != N_GLYPHS {
                return Err(DataError::Config("IDX digits always have 10 classes".into()));
            }
            Some(data)
        }
    };
    let (rows, cols) = idx.as_ref().map_or((CANVAS, CANVAS), |d| (d.rows, d.cols));

    let make = |index: usize| -> Result<LabeledImage, DataError> {
        let mut rng = record_rng(config.seed, index as u64);
        let (class_label, shape) = match &idx {
            None => {
                let class_label = rng.random_range(0..config.n_classes);
                let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
                let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
                (class_label, DigitShape::Glyph { dy, dx })
            }
            Some(d) => (
                d.labels[index] as usize,
                DigitShape::Raster {
                    rows: d.rows,
                    cols: d.cols,
                    bytes: d.image_bytes(index).to_vec(),
                },
            ),
        };
        let color = sample_color(config, class_label, &mut rng);
        let concept_label = nearest_palette_index(&config.palette, &color);
        let record = GenerationRecord::Digit { shape, color };
        let pixels = render(&family, class_label, concept_label, None, &record)?;
        Ok(LabeledImage {
            pixels,
            class_label,
            concept_label,
            marker: None,
            record,
        })
    };
    let build = |range: std::ops::Range<usize>, split| -> Result<Dataset, DataError> {
        let records = range.into_par_iter().map(make).collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset {
            records,
            n_classes: config.n_classes,
            n_concept_values: PALETTE_SIZE,
            image_shape: [3, rows, cols],
            provenance: Provenance {
                family: family.clone(),
                split,
                seed: config.seed,
                dummy: None,
            },
        })
    };
    let n = config.n_train;
    Ok(DatasetSplits {
        train: build(0..n, Split::Train)?,
        test: build(n..n + config.n_test, Split::Test)?,
    })
}

/// Recolour the foreground with the palette colour `target_concept`,
/// keeping the intensity map.
pub fn intervene_color(
    record: &LabeledImage,
    target_concept: usize,
    config: &ColoredDigitsConfig,
) -> Result<LabeledImage, DataError> {
    intervene_axis(record, ConceptAxis::Primary, target_concept, config)
}

pub(crate) fn intervene_axis(
    record: &LabeledImage,
    axis: ConceptAxis,
    value: usize,
    cfg: &ColoredDigitsConfig,
) -> Result<LabeledImage, DataError> {
    let GenerationRecord::Digit { shape, .. } = &record.record else {
        return Err(DataError::FamilyMismatch {
            expected: "colored_digits",
        });
    };
    let mut out = record.clone();
    match axis {
        ConceptAxis::Primary => {
            check_concept(value, cfg.palette.len())?;
            out.concept_label = value;
            if let GenerationRecord::Digit { color, .. } = &mut out.record {
                *color = cfg.palette[value];
            }
        }
        ConceptAxis::Label => {
            check_concept(value, cfg.n_classes)?;
            if matches!(shape, DigitShape::Raster { .. }) {
                return Err(DataError::Unsupported(
                    "IDX digits have no generative oracle for the class label".into(),
                ));
            }
            out.class_label = value;
        }
        ConceptAxis::Dummy => {
            check_concept(value, 2)?;
            if record.marker.is_none() {
                return Err(DataError::Unsupported("record has no dummy concept".into()));
            }
            out.marker = Some(value == 1);
        }
    }
    out.pixels = render(
        &DatasetFamily::ColoredDigits(cfg.clone()),
        out.class_label,
        out.concept_label,
        out.marker,
        &out.record,
    )?;
    Ok(out)
}
