//! Conditional VAE over images, conditioned on one-hot class and concept.
//!
//! The encoder sees `[image, onehot(class), onehot(concept)]`; the decoder
//! sees `[z, (relaxed category), onehot(class), onehot(concept)]` and emits
//! Bernoulli logits per pixel. The prior is a standard normal (and uniform
//! over categories when the discrete latent is enabled).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::classifier::batch_inputs;
use super::mlp::{Activation, Mlp};
use super::train::{balanced_order, run_epoch, shuffled, TrainingConfig};
use super::ModelError;
use crate::autodiff::{sigmoid, Bindings, Graph, NodeId, OptimizerState, Params, Tensor};
use crate::data::{ConceptAxis, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteLatentConfig {
    pub n_categories: usize,
    /// Relaxation temperature, annealed linearly from start to end.
    pub temperature_start: f64,
    pub temperature_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub discrete: Option<DiscreteLatentConfig>,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Final KL weight after warm-up.
    pub kl_weight: f64,
    /// Fraction of epochs over which the KL weight ramps up from 0.
    pub kl_warmup_fraction: f64,
    /// Which concept the model is conditioned on.
    pub concept_axis: ConceptAxis,
    /// Draw minibatches uniformly over (class, concept) cells instead of
    /// over records, so rare combinations are not drowned out.
    pub balance_conditions: bool,
    pub training: TrainingConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            discrete: None,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
            kl_weight: 1.0,
            kl_warmup_fraction: 1.0 / 3.0,
            concept_axis: ConceptAxis::Primary,
            balance_conditions: false,
            training: TrainingConfig::default(),
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent_dim == 0 {
            return Err(ModelError::Config("latent_dim must be positive".into()));
        }
        if self.encoder_hidden.is_empty() || self.decoder_hidden.is_empty() {
            return Err(ModelError::Config(
                "encoder and decoder need hidden layers".into(),
            ));
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(ModelError::Config("hidden layers must be non-empty".into()));
        }
        if let Some(d) = &self.discrete {
            if d.n_categories < 2 {
                return Err(ModelError::Config(
                    "discrete latent needs at least 2 categories".into(),
                ));
            }
            if !(d.temperature_start > 0.0 && d.temperature_end > 0.0) {
                return Err(ModelError::Config("temperatures must be positive".into()));
            }
        }
        if self.kl_weight.is_nan() || self.kl_weight < 0.0 || !(0.0..=1.0).contains(&self.kl_warmup_fraction)
        {
            return Err(ModelError::Config("invalid KL schedule".into()));
        }
        self.training.validate()
    }

    pub fn n_categories(&self) -> usize {
        self.discrete.as_ref().map_or(0, |d| d.n_categories)
    }

    /// KL weight used throughout epoch `epoch`.
    pub fn kl_weight_at(&self, epoch: usize) -> f64 {
        let warmup = (self.training.epochs as f64 * self.kl_warmup_fraction).ceil() as usize;
        if warmup == 0 {
            return self.kl_weight;
        }
        self.kl_weight * (epoch as f64 / warmup as f64).min(1.0)
    }

    pub fn temperature_at(&self, epoch: usize) -> Option<f64> {
        self.discrete.as_ref().map(|d| {
            let span = self.training.epochs.saturating_sub(1).max(1) as f64;
            let t = (epoch as f64 / span).min(1.0);
            d.temperature_start + t * (d.temperature_end - d.temperature_start)
        })
    }

    pub fn arch_tag(&self) -> String {
        let enc: Vec<String> = self.encoder_hidden.iter().map(|s| s.to_string()).collect();
        let dec: Vec<String> = self.decoder_hidden.iter().map(|s| s.to_string()).collect();
        format!("z{}-e{}-d{}", self.latent_dim, enc.join("-"), dec.join("-"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeEpochStats {
    /// Mean per-image Bernoulli negative log-likelihood.
    pub reconstruction: f64,
    /// Mean per-image KL to the prior.
    pub kl: f64,
    pub kl_weight: f64,
    /// Mean per-image loss, `reconstruction + kl_weight * kl`.
    pub total: f64,
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeHistory {
    pub epochs: Vec<VaeEpochStats>,
    /// Per-pixel MAE of `decode(encode mean)` on training images.
    pub reconstruction_mae: f64,
    /// Bound that reconstruction MAE on training data is expected to meet.
    pub reconstruction_threshold: f64,
}

/// Posterior parameters for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub category_logits: Option<Vec<f64>>,
}

/// A point in the VAE latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeLatent {
    pub continuous: Vec<f64>,
    pub category: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalVae {
    pub config: VaeConfig,
    pub n_classes: usize,
    pub n_concept_values: usize,
    pub image_shape: [usize; 3],
    pub params: Params,
    pub history: VaeHistory,
}

struct Nets {
    trunk: Mlp,
    mean: Mlp,
    log_var: Mlp,
    category: Option<Mlp>,
    decoder: Mlp,
}

impl ConditionalVae {
    pub fn initialize(
        config: VaeConfig,
        n_classes: usize,
        n_concept_values: usize,
        image_shape: [usize; 3],
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut model = Self {
            config,
            n_classes,
            n_concept_values,
            image_shape,
            params: Params::new(),
            history: VaeHistory::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.training.seed);
        let nets = model.nets();
        for net in [&nets.trunk, &nets.mean, &nets.log_var, &nets.decoder] {
            net.init(&mut model.params, &mut rng);
        }
        if let Some(c) = &nets.category {
            c.init(&mut model.params, &mut rng);
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.image_shape.iter().product()
    }

    fn cond_dim(&self) -> usize {
        self.n_classes + self.n_concept_values
    }

    fn nets(&self) -> Nets {
        let d = self.input_dim();
        let mut trunk = vec![d + self.cond_dim()];
        trunk.extend(&self.config.encoder_hidden);
        let last = *trunk.last().unwrap();
        let z = self.config.latent_dim;
        let k = self.config.n_categories();
        let mut dec = vec![z + k + self.cond_dim()];
        dec.extend(&self.config.decoder_hidden);
        dec.push(d);
        Nets {
            trunk: Mlp::new("enc", trunk, Activation::Relu, true),
            mean: Mlp::new("enc_mean", vec![last, z], Activation::Relu, false),
            log_var: Mlp::new("enc_logvar", vec![last, z], Activation::Relu, false),
            category: (k > 0).then(|| Mlp::new("enc_cat", vec![last, k], Activation::Relu, false)),
            decoder: Mlp::new("dec", dec, Activation::Relu, false),
        }
    }

    fn check_labels(&self, class_label: usize, concept: usize) -> Result<(), ModelError> {
        if class_label >= self.n_classes || concept >= self.n_concept_values {
            return Err(ModelError::Config(format!(
                "labels ({class_label}, {concept}) out of range ({}, {})",
                self.n_classes, self.n_concept_values
            )));
        }
        Ok(())
    }

    fn condition(&self, class_label: usize, concept: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.cond_dim()];
        c[class_label] = 1.0;
        c[self.n_classes + concept] = 1.0;
        c
    }

    /// Posterior parameters for one image.
    pub fn encode(
        &self,
        pixels: &[f64],
        class_label: usize,
        concept: usize,
    ) -> Result<Posterior, ModelError> {
        self.check_labels(class_label, concept)?;
        if pixels.len() != self.input_dim() {
            return Err(ModelError::Shape(format!(
                "expected {} pixels, got {}",
                self.input_dim(),
                pixels.len()
            )));
        }
        let nets = self.nets();
        let mut x = pixels.to_vec();
        x.extend(self.condition(class_label, concept));
        let h = nets.trunk.forward(&self.params, &x, 1);
        Ok(Posterior {
            mean: nets.mean.forward(&self.params, &h, 1),
            log_var: nets.log_var.forward(&self.params, &h, 1),
            category_logits: nets.category.map(|c| c.forward(&self.params, &h, 1)),
        })
    }

    /// Draw one latent from a posterior (argmax category when discrete).
    pub fn sample_posterior<R: RngCore + ?Sized>(&self, post: &Posterior, rng: &mut R) -> VaeLatent {
        let continuous = post
            .mean
            .iter()
            .zip(&post.log_var)
            .map(|(m, lv)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + (0.5 * lv).exp() * eps
            })
            .collect();
        let category = post
            .category_logits
            .as_ref()
            .map(|l| super::classifier::argmax(l));
        VaeLatent { continuous, category }
    }

    /// Image in `[0, 1]` for a latent and conditioning labels.
    pub fn decode(&self, z: &VaeLatent, class_label: usize, concept: usize) -> Result<Vec<f64>, ModelError> {
        self.check_labels(class_label, concept)?;
        if z.continuous.len() != self.config.latent_dim {
            return Err(ModelError::Shape(format!(
                "latent has {} dims, model expects {}",
                z.continuous.len(),
                self.config.latent_dim
            )));
        }
        let k = self.config.n_categories();
        let mut input = z.continuous.clone();
        if k > 0 {
            let cat = z
                .category
                .filter(|&c| c < k)
                .ok_or_else(|| ModelError::Shape("latent is missing a valid category".into()))?;
            let mut one = vec![0.0; k];
            one[cat] = 1.0;
            input.extend(one);
        }
        input.extend(self.condition(class_label, concept));
        let logits = self.nets().decoder.forward(&self.params, &input, 1);
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    /// Draw from the prior: `N(0, I)` and a uniform category.
    pub fn sample_prior<R: RngCore + ?Sized>(&self, rng: &mut R) -> VaeLatent {
        let continuous = (0..self.config.latent_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let category = self
            .config
            .discrete
            .as_ref()
            .map(|d| rng.random_range(0..d.n_categories));
        VaeLatent { continuous, category }
    }

    /// Per-pixel MAE of `decode(posterior mean)` over up to `limit` records.
    pub fn reconstruction_mae(&self, dataset: &Dataset, limit: usize) -> Result<f64, ModelError> {
        let axis = self.config.concept_axis;
        let mut total = 0.0;
        let mut count = 0usize;
        for r in dataset.records.iter().take(limit) {
            let concept = r.axis_value(axis).ok_or(ModelError::MissingAxis(axis))?;
            let post = self.encode(r.pixels.data(), r.class_label, concept)?;
            let z = VaeLatent {
                continuous: post.mean,
                category: post
                    .category_logits
                    .as_ref()
                    .map(|l| super::classifier::argmax(l)),
            };
            let img = self.decode(&z, r.class_label, concept)?;
            total += img
                .iter()
                .zip(r.pixels.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            count += img.len();
        }
        Ok(total / count.max(1) as f64)
    }
}

struct TrainingGraph {
    graph: Graph,
    total: NodeId,
    reconstruction: NodeId,
    kl: NodeId,
}

fn build_training_graph(model: &ConditionalVae) -> TrainingGraph {
    let nets = model.nets();
    let mut g = Graph::new();
    let x = g.input("x");
    let cond = g.input("cond");
    let enc_in = g.concat(vec![x, cond]);
    let h = nets.trunk.build(&mut g, enc_in);
    let mean = nets.mean.build(&mut g, h);
    let log_var = nets.log_var.build(&mut g, h);
    let eps = g.input("eps");
    let z = g.gaussian_sample(mean, log_var, eps);
    let gauss_kl = g.gaussian_kl(mean, log_var);
    let (dec_in, kl) = match &nets.category {
        Some(cat_net) => {
            let logits = cat_net.build(&mut g, h);
            let gumbel = g.input("gumbel");
            let inv_tau = g.input("inv_tau");
            let noisy = g.add(logits, gumbel);
            let scaled = g.mul(noisy, inv_tau);
            let relaxed = g.softmax(scaled);
            // KL(q || uniform) = sum q log q + log K, averaged over rows.
            let q = g.softmax(logits);
            let log_q = g.log_softmax(logits);
            let q_log_q = g.mul(q, log_q);
            let summed = g.sum(q_log_q);
            let inv_rows = g.input("inv_rows");
            let per_row = g.mul(summed, inv_rows);
            let log_k = g.input("log_k");
            let cat_kl = g.add(per_row, log_k);
            let kl = g.add(gauss_kl, cat_kl);
            (g.concat(vec![z, relaxed, cond]), kl)
        }
        None => (g.concat(vec![z, cond]), gauss_kl),
    };
    let out = nets.decoder.build(&mut g, dec_in);
    let reconstruction = g.bce_with_logits(out, x);
    g.label(reconstruction, "reconstruction");
    let kl_weight = g.input("kl_weight");
    let weighted = g.mul(kl, kl_weight);
    let total = g.add(reconstruction, weighted);
    g.label(total, "elbo_loss");
    TrainingGraph {
        graph: g,
        total,
        reconstruction,
        kl,
    }
}

/// Maximise the ELBO with KL warm-up. Deterministic given the seed.
pub fn train_cvae(dataset: &Dataset, config: &VaeConfig) -> Result<ConditionalVae, ModelError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let axis = config.concept_axis;
    let n_concepts = dataset.n_values(axis).ok_or(ModelError::MissingAxis(axis))?;
    let concepts: Vec<usize> = dataset
        .records
        .iter()
        .map(|r| r.axis_value(axis).ok_or(ModelError::MissingAxis(axis)))
        .collect::<Result<_, _>>()?;
    let mut model =
        ConditionalVae::initialize(config.clone(), dataset.n_classes, n_concepts, dataset.image_shape)?;
    let TrainingGraph {
        mut graph,
        total,
        reconstruction,
        kl,
    } = build_training_graph(&model);

    let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    rng.set_stream(1);
    let mut state = OptimizerState::new(config.training.learning_rate)?;
    let latent = config.latent_dim;
    let k = config.n_categories();
    let cond_dim = model.cond_dim();
    let conds: Vec<f64> = dataset
        .records
        .iter()
        .zip(&concepts)
        .flat_map(|(r, &c)| model.condition(r.class_label, c))
        .collect();
    let mut cells = vec![Vec::new(); dataset.n_classes * n_concepts];
    for (i, r) in dataset.records.iter().enumerate() {
        cells[r.class_label * n_concepts + concepts[i]].push(i);
    }
    for epoch in 0..config.training.epochs {
        let kl_weight = config.kl_weight_at(epoch);
        let temperature = config.temperature_at(epoch);
        let (mut rec_sum, mut kl_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let order = if config.balance_conditions {
            balanced_order(&cells, dataset.len(), &mut rng)
        } else {
            shuffled(dataset.len(), &mut rng)
        };
        run_epoch(
            &mut graph,
            total,
            &mut model.params,
            &mut state,
            &config.training,
            &order,
            &mut rng,
            |idx, rng| {
                let rows = idx.len();
                let mut b = Bindings::new();
                b.insert("x".into(), batch_inputs(dataset, idx));
                let mut cond = Vec::with_capacity(rows * cond_dim);
                for &i in idx {
                    cond.extend_from_slice(&conds[i * cond_dim..(i + 1) * cond_dim]);
                }
                b.insert("cond".into(), Tensor::new(vec![rows, cond_dim], cond).unwrap());
                let eps = (0..rows * latent).map(|_| rng.sample(StandardNormal)).collect();
                b.insert("eps".into(), Tensor::new(vec![rows, latent], eps).unwrap());
                if let Some(t) = temperature {
                    let gumbel = (0..rows * k)
                        .map(|_| {
                            let u: f64 = rng.random_range(1e-12..1.0);
                            -(-u.ln()).ln()
                        })
                        .collect();
                    b.insert("gumbel".into(), Tensor::new(vec![rows, k], gumbel).unwrap());
                    b.insert("inv_tau".into(), Tensor::scalar(1.0 / t));
                    b.insert("inv_rows".into(), Tensor::scalar(1.0 / rows as f64));
                    b.insert("log_k".into(), Tensor::scalar((k as f64).ln()));
                }
                b.insert("kl_weight".into(), Tensor::scalar(kl_weight));
                b
            },
            |g, idx| {
                let n = idx.len() as f64;
                rec_sum += g.value(reconstruction).unwrap().data()[0] * n;
                kl_sum += g.value(kl).unwrap().data()[0] * n;
                total_sum += g.value(total).unwrap().data()[0] * n;
            },
        )?;
        let n = dataset.len() as f64;
        let stats = VaeEpochStats {
            reconstruction: rec_sum / n,
            kl: kl_sum / n,
            kl_weight,
            total: total_sum / n,
            temperature,
        };
        log::debug!(
            "cvae epoch {epoch}: rec {:.4} kl {:.4} w {:.3}",
            stats.reconstruction,
            stats.kl,
            stats.kl_weight
        );
        model.history.epochs.push(stats);
    }
    let mae = model.reconstruction_mae(dataset, 512)?;
    model.history.reconstruction_mae = mae;
    model.history.reconstruction_threshold = 1.5 * mae + 1e-9;
    Ok(model)
}
