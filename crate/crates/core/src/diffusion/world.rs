use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{special_token, ConditioningContext, NoiseSchedule, TrainingExample};
use crate::embedding::AttributeSet;
use crate::error::{Error, Result};
use crate::synthetic::{PlantedGateWorld, PlantedWorldConfig};

/// Toy world, model and training configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    /// Sample dimension.
    pub k: usize,
    /// Conditioning (prompt embedding) dimension.
    pub d_c: usize,
    /// Attention head dimension.
    pub d_h: usize,
    /// Hidden width around the attention block.
    pub d_x: usize,
    pub rank: usize,
    #[serde(rename = "T")]
    pub steps_t: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub lr: f64,
    pub batch: usize,
    /// Base model pre-training steps.
    pub steps: usize,
    /// Share of the majority attribute in every concept's training data.
    pub p_male: f64,
    pub sigma_world: f64,
    pub seed: u64,
    pub concepts: usize,
    /// Distance between the two attribute means of a concept.
    pub separation: f64,
    pub expert_lr: f64,
    pub expert_steps: usize,
    pub samples_per_concept: usize,
    pub special_token: bool,
    /// Fraction of pre-training examples that carry the special token, so
    /// the base model learns to ignore it.
    pub pretrain_token_rate: f64,
    pub gate_lambda: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            k: 4,
            d_c: 16,
            d_h: 16,
            d_x: 32,
            rank: 4,
            steps_t: 50,
            beta_min: 1e-4,
            beta_max: 0.05,
            lr: 1e-3,
            batch: 32,
            steps: 60_000,
            p_male: 0.8,
            sigma_world: 0.1,
            seed: 7,
            concepts: 12,
            separation: 1.0,
            expert_lr: 1.0,
            expert_steps: 1000,
            samples_per_concept: 200,
            special_token: true,
            pretrain_token_rate: 0.5,
            gate_lambda: 100.0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("d_c", self.d_c),
            ("d_h", self.d_h),
            ("d_x", self.d_x),
            ("rank", self.rank),
            ("batch", self.batch),
            ("concepts", self.concepts),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.d_c < 2 {
            return Err(Error::invalid("d_c must be at least 2"));
        }
        if self.rank >= self.d_x.min(self.d_c).min(self.d_h) {
            return Err(Error::invalid("rank must be below d_x, d_c and d_h"));
        }
        if !(0.0..=1.0).contains(&self.pretrain_token_rate) {
            return Err(Error::invalid("pretrain_token_rate must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.p_male) {
            return Err(Error::invalid("p_male must lie in [0, 1]"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("expert_lr", self.expert_lr),
            ("sigma_world", self.sigma_world),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive and finite")));
            }
        }
        if !(self.gate_lambda.is_finite() && self.gate_lambda >= 0.0) {
            return Err(Error::invalid("gate_lambda must be finite and >= 0"));
        }
        if self.separation <= 4.0 * self.sigma_world {
            return Err(Error::invalid("separation must exceed 4 * sigma_world"));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps_t, self.beta_min, self.beta_max)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One conditioning concept with two attribute clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub name: String,
    pub embedding: Vec<f64>,
    /// Cluster means in attribute order (male, female).
    pub means: [DVector<f64>; 2],
    /// Probability of drawing the first attribute.
    pub p_first: f64,
}

/// Concepts drawn from a planted gate world: a concept's embedding is its
/// neutral prompt embedding and its majority attribute follows the planted
/// skew, so the gate has something real to find.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub attributes: AttributeSet,
    pub concepts: Vec<Concept>,
    pub sigma: f64,
    pub special_token: Vec<f64>,
    pub gate: PlantedGateWorld,
}

impl SyntheticWorld {
    pub fn generate(cfg: &ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let gate = PlantedGateWorld::generate(&PlantedWorldConfig {
            dim: cfg.d_c,
            occupations: cfg.concepts,
            seed: cfg.seed,
            ..PlantedWorldConfig::default()
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0077_6f72_6c64);
        let concepts = gate
            .inputs
            .prompts()
            .entries()
            .iter()
            .enumerate()
            .map(|(i, (name, z))| {
                let center = gauss(&mut rng, cfg.k, 0.5);
                let dir = {
                    let v = gauss(&mut rng, cfg.k, 1.0);
                    let n = v.norm();
                    v / n
                };
                let half = &dir * (cfg.separation / 2.0);
                let male_skewed = gate.skews[i] > 0.0;
                Concept {
                    name: name.clone(),
                    embedding: z.as_slice().to_vec(),
                    means: [&center + &half, &center - &half],
                    p_first: if male_skewed { cfg.p_male } else { 1.0 - cfg.p_male },
                }
            })
            .collect();
        Ok(Self {
            attributes: AttributeSet::gender(),
            concepts,
            sigma: cfg.sigma_world,
            special_token: special_token(cfg.d_c, cfg.seed),
            gate,
        })
    }

    pub fn context(&self, concept: usize, special: bool) -> Result<ConditioningContext> {
        let c = &self.concepts[concept];
        ConditioningContext::new(&c.embedding, special.then_some(self.special_token.as_slice()))
    }

    /// A clean sample of `concept` from attribute cluster `attribute`.
    pub fn draw(&self, rng: &mut ChaCha8Rng, concept: usize, attribute: usize) -> DVector<f64> {
        let mean = &self.concepts[concept].means[attribute];
        mean + gauss(rng, mean.len(), self.sigma)
    }

    /// Training batch over uniformly chosen concepts. With `attribute` set,
    /// every example comes from that cluster; otherwise the concept's
    /// mixing fraction decides. Each example carries the special token with
    /// probability `token_rate`.
    pub fn batch(
        &self,
        rng: &mut ChaCha8Rng,
        n: usize,
        attribute: Option<usize>,
        token_rate: f64,
    ) -> Result<Vec<TrainingExample>> {
        (0..n)
            .map(|_| {
                let ci = rng.random_range(0..self.concepts.len());
                let a = attribute.unwrap_or_else(|| usize::from(!rng.random_bool(self.concepts[ci].p_first)));
                let special = token_rate > 0.0 && (token_rate >= 1.0 || rng.random_bool(token_rate));
                Ok(TrainingExample {
                    z0: self.draw(rng, ci, a),
                    context: self.context(ci, special)?,
                })
            })
            .collect()
    }
}

fn gauss(rng: &mut ChaCha8Rng, k: usize, std: f64) -> DVector<f64> {
    DVector::from_fn(k, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        x * std
    })
}

/// Nearest attribute mean by Euclidean distance; an exact tie goes to the
/// first attribute.
pub fn oracle_classify<'w>(world: &'w SyntheticWorld, concept: usize, sample: &DVector<f64>) -> Result<&'w str> {
    let c = world
        .concepts
        .get(concept)
        .ok_or_else(|| Error::invalid(format!("concept index {concept} out of range")))?;
    if sample.len() != c.means[0].len() {
        return Err(Error::DimensionMismatch {
            expected: c.means[0].len(),
            found: sample.len(),
        });
    }
    let d0 = (sample - &c.means[0]).norm_squared();
    let d1 = (sample - &c.means[1]).norm_squared();
    Ok(&world.attributes.names()[usize::from(d1 < d0)])
}
