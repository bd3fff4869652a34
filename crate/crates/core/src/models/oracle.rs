use rand::{Rng, RngCore};

use super::cvae::{ConditionalVae, VaeLatent};
use super::ModelError;
use crate::data::{intervene, ConceptAxis, Dataset, LabeledImage};

/// Latent representation handed between `encode`/`sample_prior` and `decode`.
#[derive(Debug, Clone, PartialEq)]
pub enum Latent {
    Vector(VaeLatent),
    /// The generation record itself; used by the exact generator.
    Record(Box<LabeledImage>),
}

/// Conditional generator that can render an image for any
/// `(latent, class, concept)`.
///
/// For [`ConceptAxis::Label`] the concept *is* the class, and `decode`
/// uses `concept` for both.
pub trait GeneratorOracle: Sync {
    fn concept_axis(&self) -> ConceptAxis;
    fn n_classes(&self) -> usize;
    fn n_concept_values(&self) -> usize;

    /// Draw a latent for an observed image from the approximate posterior.
    fn encode(&self, image: &LabeledImage, rng: &mut dyn RngCore) -> Result<Latent, ModelError>;

    /// Render an image in `[0, 1]`, flattened.
    fn decode(&self, z: &Latent, class_label: usize, concept: usize) -> Result<Vec<f64>, ModelError>;

    /// Draw a latent from the prior, optionally for a given class.
    fn sample_prior(&self, class_label: Option<usize>, rng: &mut dyn RngCore) -> Result<Latent, ModelError>;
}

/// Exact generator built on the dataset's own rendering: encoding returns
/// the record, decoding re-renders it under intervention, and the prior is
/// the empirical distribution of records.
#[derive(Debug, Clone)]
pub struct GroundTruthGenerator {
    dataset: Dataset,
    axis: ConceptAxis,
    by_class: Vec<Vec<usize>>,
}

impl GroundTruthGenerator {
    pub fn new(dataset: Dataset, axis: ConceptAxis) -> Result<Self, ModelError> {
        if dataset.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        dataset.n_values(axis).ok_or(ModelError::MissingAxis(axis))?;
        let mut by_class = vec![Vec::new(); dataset.n_classes];
        for (i, r) in dataset.records.iter().enumerate() {
            by_class[r.class_label].push(i);
        }
        Ok(Self {
            dataset,
            axis,
            by_class,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// Counterfactual record for the given class and concept.
    pub fn decode_record(
        &self,
        record: &LabeledImage,
        class_label: usize,
        concept: usize,
    ) -> Result<LabeledImage, ModelError> {
        let family = &self.dataset.provenance.family;
        let mut img = record.clone();
        if self.axis != ConceptAxis::Label && img.class_label != class_label {
            img = intervene(&img, ConceptAxis::Label, class_label, family)?;
        }
        if img.axis_value(self.axis) != Some(concept) {
            img = intervene(&img, self.axis, concept, family)?;
        }
        Ok(img)
    }
}

impl GeneratorOracle for GroundTruthGenerator {
    fn concept_axis(&self) -> ConceptAxis {
        self.axis
    }

    fn n_classes(&self) -> usize {
        self.dataset.n_classes
    }

    fn n_concept_values(&self) -> usize {
        self.dataset.n_values(self.axis).unwrap_or(0)
    }

    fn encode(&self, image: &LabeledImage, _rng: &mut dyn RngCore) -> Result<Latent, ModelError> {
        Ok(Latent::Record(Box::new(image.clone())))
    }

    fn decode(&self, z: &Latent, class_label: usize, concept: usize) -> Result<Vec<f64>, ModelError> {
        match z {
            Latent::Record(r) => Ok(self.decode_record(r, class_label, concept)?.pixels.into_data()),
            Latent::Vector(_) => Err(ModelError::Config(
                "exact generator cannot decode a latent vector".into(),
            )),
        }
    }

    fn sample_prior(&self, class_label: Option<usize>, rng: &mut dyn RngCore) -> Result<Latent, ModelError> {
        let pool = match class_label {
            Some(c) => self
                .by_class
                .get(c)
                .ok_or_else(|| ModelError::Config(format!("class {c} out of range")))?,
            None => &(0..self.dataset.len()).collect(),
        };
        if pool.is_empty() {
            return Err(ModelError::Config(format!("no records of class {class_label:?}")));
        }
        let i = pool[rng.random_range(0..pool.len())];
        Ok(Latent::Record(Box::new(self.dataset.records[i].clone())))
    }
}

impl GeneratorOracle for ConditionalVae {
    fn concept_axis(&self) -> ConceptAxis {
        self.config.concept_axis
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn n_concept_values(&self) -> usize {
        self.n_concept_values
    }

    fn encode(&self, image: &LabeledImage, rng: &mut dyn RngCore) -> Result<Latent, ModelError> {
        let axis = self.config.concept_axis;
        let concept = image.axis_value(axis).ok_or(ModelError::MissingAxis(axis))?;
        let post = ConditionalVae::encode(self, image.pixels.data(), image.class_label, concept)?;
        Ok(Latent::Vector(self.sample_posterior(&post, rng)))
    }

    fn decode(&self, z: &Latent, class_label: usize, concept: usize) -> Result<Vec<f64>, ModelError> {
        let class_label = if self.config.concept_axis == ConceptAxis::Label {
            concept
        } else {
            class_label
        };
        match z {
            Latent::Vector(v) => ConditionalVae::decode(self, v, class_label, concept),
            Latent::Record(_) => Err(ModelError::Config("VAE cannot decode a raw record".into())),
        }
    }

    fn sample_prior(&self, _class_label: Option<usize>, rng: &mut dyn RngCore) -> Result<Latent, ModelError> {
        Ok(Latent::Vector(ConditionalVae::sample_prior(self, rng)))
    }
}
