use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_concept, record_rng, render, ConceptAxis, DataError, Dataset, DatasetFamily, DatasetSplits,
    GenerationRecord, LabeledImage, Orientation, Provenance, Split,
};
use crate::autodiff::Tensor;

/// RGB of concept 0 (red) and concept 1 (green).
pub const BAR_COLORS: [[f64; 3]; 2] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

/// One axis-aligned bar per image. Class 0 is horizontal, class 1 vertical;
/// concept 0 is red, concept 1 green.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarsConfig {
    pub height: usize,
    pub width: usize,
    /// Fraction of horizontal (class 0) bars that are red.
    pub red_fraction_class0: f64,
    /// Fraction of vertical (class 1) bars that are red.
    pub red_fraction_class1: f64,
    pub thickness_min: usize,
    pub thickness_max: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for BarsConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            red_fraction_class0: 0.5,
            red_fraction_class1: 0.5,
            thickness_min: 2,
            thickness_max: 4,
            n_train: 20_000,
            n_test: 4_000,
            seed: 0,
        }
    }
}

impl BarsConfig {
    pub fn with_bias(red_fraction_class0: f64, red_fraction_class1: f64) -> Self {
        Self {
            red_fraction_class0,
            red_fraction_class1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (name, p) in [
            ("red_fraction_class0", self.red_fraction_class0),
            ("red_fraction_class1", self.red_fraction_class1),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.height == 0 || self.width == 0 {
            return Err(DataError::Config("image extent must be positive".into()));
        }
        if self.thickness_min == 0 || self.thickness_min > self.thickness_max {
            return Err(DataError::Config(format!(
                "thickness range {}..={} is empty or zero",
                self.thickness_min, self.thickness_max
            )));
        }
        if self.thickness_max > self.height.min(self.width) {
            return Err(DataError::Config(format!(
                "bar thickness {} does not fit a {}x{} image",
                self.thickness_max, self.height, self.width
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(DataError::Config("n_train and n_test must be positive".into()));
        }
        Ok(())
    }

    /// `P(concept | class)` as `[class][concept]`.
    pub fn concept_probabilities(&self) -> Vec<Vec<f64>> {
        vec![
            vec![self.red_fraction_class0, 1.0 - self.red_fraction_class0],
            vec![self.red_fraction_class1, 1.0 - self.red_fraction_class1],
        ]
    }

    fn extent(&self, orientation: Orientation) -> usize {
        match orientation {
            Orientation::Horizontal => self.height,
            Orientation::Vertical => self.width,
        }
    }
}

pub(crate) fn orientation_of(class_label: usize) -> Orientation {
    if class_label == 0 {
        Orientation::Horizontal
    } else {
        Orientation::Vertical
    }
}

pub(crate) fn render_bar(
    cfg: &BarsConfig,
    class_label: usize,
    concept_label: usize,
    offset: usize,
    thickness: usize,
) -> Result<Tensor, DataError> {
    check_concept(class_label, 2)?;
    check_concept(concept_label, 2)?;
    let orientation = orientation_of(class_label);
    if offset + thickness > cfg.extent(orientation) {
        return Err(DataError::Config(format!(
            "bar at offset {offset} with thickness {thickness} leaves the image"
        )));
    }
    let (h, w) = (cfg.height, cfg.width);
    let mut data = vec![0.0; 3 * h * w];
    let color = BAR_COLORS[concept_label];
    for (c, &value) in color.iter().enumerate() {
        if value == 0.0 {
            continue;
        }
        let plane = &mut data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let pos = match orientation {
                    Orientation::Horizontal => y,
                    Orientation::Vertical => x,
                };
                if (offset..offset + thickness).contains(&pos) {
                    plane[y * w + x] = value;
                }
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Generate train and test splits. Record `i` of the combined stream draws
/// from its own generator, with test records following the training ones.
pub fn generate_bars(config: &BarsConfig) -> Result<DatasetSplits, DataError> {
    config.validate()?;
    let family = DatasetFamily::Bars(config.clone());
    let make = |index: usize| -> Result<LabeledImage, DataError> {
        let mut rng = record_rng(config.seed, index as u64);
        let class_label = rng.random_range(0..2usize);
        let red_p = if class_label == 0 {
            config.red_fraction_class0
        } else {
            config.red_fraction_class1
        };
        let concept_label = if rng.random::<f64>() < red_p { 0 } else { 1 };
        let thickness = rng.random_range(config.thickness_min..=config.thickness_max);
        let extent = config.extent(orientation_of(class_label));
        let offset = rng.random_range(0..=extent - thickness);
        let record = GenerationRecord::Bar { offset, thickness };
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
            n_classes: 2,
            n_concept_values: 2,
            image_shape: [3, config.height, config.width],
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

/// Recolour the bar to `target_concept`, keeping position and thickness.
pub fn intervene_bars(
    record: &LabeledImage,
    target_concept: usize,
    config: &BarsConfig,
) -> Result<LabeledImage, DataError> {
    intervene_axis(record, ConceptAxis::Primary, target_concept, config)
}

pub(crate) fn intervene_axis(
    record: &LabeledImage,
    axis: ConceptAxis,
    value: usize,
    cfg: &BarsConfig,
) -> Result<LabeledImage, DataError> {
    if !matches!(record.record, GenerationRecord::Bar { .. }) {
        return Err(DataError::FamilyMismatch { expected: "bars" });
    }
    let mut out = record.clone();
    match axis {
        ConceptAxis::Primary => {
            check_concept(value, 2)?;
            out.concept_label = value;
        }
        ConceptAxis::Label => {
            check_concept(value, 2)?;
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
        &DatasetFamily::Bars(cfg.clone()),
        out.class_label,
        out.concept_label,
        out.marker,
        &out.record,
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(p0: f64, p1: f64, n: usize) -> BarsConfig {
        BarsConfig {
            n_train: n,
            n_test: 10,
            seed: 11,
            ..BarsConfig::with_bias(p0, p1)
        }
    }

    #[test]
    fn degenerate_bias_is_exact() {
        let d = generate_bars(&small(1.0, 0.0, 500)).unwrap().train;
        for r in &d.records {
            assert_eq!(r.concept_label, r.class_label);
        }
    }

    #[test]
    fn red_fraction_concentrates() {
        let d = generate_bars(&small(0.9, 0.1, 10_000)).unwrap().train;
        let counts = d.joint_counts();
        let frac = counts[0][0] as f64 / (counts[0][0] + counts[0][1]) as f64;
        assert!((0.89..=0.91).contains(&frac), "red fraction {frac}");
    }

    #[test]
    fn one_bar_per_image() {
        let d = generate_bars(&small(0.6, 0.4, 200)).unwrap().train;
        for r in &d.records {
            let GenerationRecord::Bar { offset, thickness } = r.record else {
                panic!()
            };
            let lit: usize = r.pixels.data().iter().filter(|v| **v > 0.0).count();
            assert_eq!(lit, thickness * 16);
            let (h, w) = (16, 16);
            let c = if r.concept_label == 0 { 0 } else { 1 };
            for y in 0..h {
                for x in 0..w {
                    let pos = if r.class_label == 0 { y } else { x };
                    let inside = (offset..offset + thickness).contains(&pos);
                    assert_eq!(r.pixels.data()[c * h * w + y * w + x] == 1.0, inside);
                }
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_bars(&BarsConfig::with_bias(1.2, 0.0)).is_err());
        let cfg = BarsConfig {
            thickness_max: 17,
            ..BarsConfig::default()
        };
        assert!(matches!(generate_bars(&cfg), Err(DataError::Config(_))));
        let cfg = BarsConfig {
            thickness_min: 5,
            thickness_max: 4,
            ..BarsConfig::default()
        };
        assert!(generate_bars(&cfg).is_err());
    }

    #[test]
    fn intervention_recolours_only_the_bar() {
        let cfg = small(0.5, 0.5, 50);
        let d = generate_bars(&cfg).unwrap().train;
        for r in &d.records {
            let same = intervene_bars(r, r.concept_label, &cfg).unwrap();
            assert_eq!(same.pixels, r.pixels);
            let flipped = intervene_bars(r, 1 - r.concept_label, &cfg).unwrap();
            let back = intervene_bars(&flipped, r.concept_label, &cfg).unwrap();
            assert_eq!(back, *r);
            assert_eq!(flipped.record, r.record);
            // bar mask: pixels lit in any channel
            let mask = |t: &Tensor| -> Vec<bool> {
                (0..256)
                    .map(|i| (0..3).any(|c| t.data()[c * 256 + i] > 0.0))
                    .collect()
            };
            assert_eq!(mask(&flipped.pixels), mask(&r.pixels));
        }
        assert!(matches!(
            intervene_bars(&d.records[0], 2, &cfg),
            Err(DataError::UnknownConcept { value: 2, .. })
        ));
    }

    #[test]
    fn label_intervention_rotates_the_bar() {
        let cfg = small(0.5, 0.5, 20);
        let d = generate_bars(&cfg).unwrap().train;
        let r = &d.records[0];
        let rot = intervene_axis(r, ConceptAxis::Label, 1 - r.class_label, &cfg).unwrap();
        assert_eq!(rot.concept_label, r.concept_label);
        assert_ne!(rot.pixels, r.pixels);
    }
}
