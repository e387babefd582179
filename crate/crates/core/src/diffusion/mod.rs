//! A toy conditional denoising-diffusion model.
//!
//! The denoiser predicts the noise `ε` added to a `k`-dimensional sample and
//! conditions on a short token sequence through an [`AdaptedAttentionBlock`],
//! so bias adapters and expert mixing work exactly as in the attention module.
//!
//! [`AdaptedAttentionBlock`]: crate::adapter::AdaptedAttentionBlock

mod denoiser;
mod train;
mod world;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub use denoiser::{DenoiserGrad, MixedDenoiser, ToyDenoiser, TDEN_MAGIC, TDEN_VERSION, TIME_EMBED_DIM};
pub use train::{bias_loss_grad, pretrain, train_expert, TrainReport, TrainSettings};
pub use world::{oracle_classify, Concept, SyntheticWorld, ToyConfig};

/// Variance schedule `β_1..β_T` with cumulative products `ᾱ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::invalid("noise schedule needs at least 2 steps"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Betas spaced linearly from `beta_min` at `t = 1` to `beta_max` at `t = T`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid("noise schedule needs at least 2 steps"));
        }
        if beta_min > beta_max {
            return Err(Error::invalid("beta_min must not exceed beta_max"));
        }
        let span = (steps - 1) as f64;
        Self::new(
            (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / span)
                .collect(),
        )
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `1 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · ε`.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    z0: &DVector<f64>,
    t: usize,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    schedule.check_step(t)?;
    if z0.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            expected: z0.len(),
            found: eps.len(),
        });
    }
    let ab = schedule.alpha_bar(t);
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Conditioning tokens: the concept embedding, optionally followed by the
/// special token.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningContext {
    tokens: DMatrix<f64>,
    special: bool,
}

impl ConditioningContext {
    pub fn new(concept: &[f64], special: Option<&[f64]>) -> Result<Self> {
        if concept.is_empty() {
            return Err(Error::invalid("empty concept embedding"));
        }
        let mut rows = vec![concept];
        if let Some(s) = special {
            if s.len() != concept.len() {
                return Err(Error::DimensionMismatch {
                    expected: concept.len(),
                    found: s.len(),
                });
            }
            rows.push(s);
        }
        let flat: Vec<f64> = rows.concat();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite conditioning token"));
        }
        Ok(Self {
            tokens: DMatrix::from_row_slice(rows.len(), concept.len(), &flat),
            special: special.is_some(),
        })
    }

    pub fn tokens(&self) -> &DMatrix<f64> {
        &self.tokens
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn has_special_token(&self) -> bool {
        self.special
    }
}

/// A fixed, seeded conditioning vector standing in for the special token.
pub fn special_token(d_c: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x736b_7373_6b73);
    let scale = 1.0 / (d_c as f64).sqrt();
    (0..d_c)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x * scale
        })
        .collect()
}

/// Anything that predicts `ε` from `(z_t, t, context)`.
pub trait NoisePredictor: Sync {
    fn output_dim(&self) -> usize;
    fn predict(&self, z: &DVector<f64>, t: usize, ctx: &ConditioningContext) -> Result<DVector<f64>>;
}

/// One training example: a clean sample and its conditioning.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub z0: DVector<f64>,
    pub context: ConditioningContext,
}

/// Timestep and noise drawn for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: DVector<f64>,
}

impl NoiseDraw {
    pub fn sample(rng: &mut ChaCha8Rng, n: usize, k: usize, steps: usize) -> Vec<Self> {
        let ts = Uniform::new_inclusive(1, steps).expect("steps >= 1");
        (0..n)
            .map(|_| {
                let t = ts.sample(rng);
                let eps = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
                Self { t, eps }
            })
            .collect()
    }
}

/// Mean of `‖ε − ε_θ(z_t, t, context)‖²` over the batch.
pub fn bias_loss(
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    batch: &[TrainingExample],
    draws: &[NoiseDraw],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    if batch.len() != draws.len() {
        return Err(Error::invalid("one noise draw is needed per training example"));
    }
    let mut total = 0.0;
    for (ex, d) in batch.iter().zip(draws) {
        let zt = forward_noise(schedule, &ex.z0, d.t, &d.eps)?;
        let pred = model.predict(&zt, d.t, &ex.context)?;
        total += (&d.eps - pred).norm_squared();
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence("non-finite loss".into()));
    }
    Ok(loss)
}

/// Ancestral reverse diffusion from `z_T ~ N(0, I)`. Sample `i` draws from the
/// ChaCha stream `i` of `seed`, so results do not depend on thread count.
pub fn sample(
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    ctx: &ConditioningContext,
    n: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample_one(model, schedule, ctx, &mut rng)
        })
        .collect()
}

fn sample_one(
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    ctx: &ConditioningContext,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    let k = model.output_dim();
    let mut z = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict(&z, t, ctx)?;
        let beta = schedule.beta(t);
        z = (z - eps * (beta / (1.0 - schedule.alpha_bar(t)).sqrt())) / (1.0 - beta).sqrt();
        if t > 1 {
            let xi = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
            z += xi * beta.sqrt();
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite sample at step {t}")));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Zero(usize);

    impl NoisePredictor for Zero {
        fn output_dim(&self) -> usize {
            self.0
        }
        fn predict(&self, _: &DVector<f64>, _: usize, _: &ConditioningContext) -> Result<DVector<f64>> {
            Ok(DVector::zeros(self.0))
        }
    }

    // returns the noise that produced z_t from a known z0
    struct Oracle {
        schedule: NoiseSchedule,
        z0: Vec<DVector<f64>>,
    }

    impl NoisePredictor for Oracle {
        fn output_dim(&self) -> usize {
            self.z0[0].len()
        }
        fn predict(&self, z: &DVector<f64>, t: usize, ctx: &ConditioningContext) -> Result<DVector<f64>> {
            let i = ctx.tokens()[(0, 0)] as usize;
            let ab = self.schedule.alpha_bar(t);
            Ok((z - &self.z0[i] * ab.sqrt()) / (1.0 - ab).sqrt())
        }
    }

    fn ctx() -> ConditioningContext {
        ConditioningContext::new(&[0.0, 1.0], None).unwrap()
    }

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(50) - 0.05).abs() < 1e-15);
        for t in 2..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1) < 1.0);
        assert!(NoiseSchedule::linear(1, 1e-4, 0.05).is_err());
        assert!(NoiseSchedule::new(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn forward_noise_matches_formula() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let eps = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let t = 17;
        let zt = forward_noise(&s, &z0, t, &eps).unwrap();
        let ab: f64 = (1..=t).map(|i| 1.0 - s.beta(i)).product();
        for i in 0..4 {
            assert!((zt[i] - (ab.sqrt() * z0[i] + (1.0 - ab).sqrt() * eps[i])).abs() < 1e-14);
        }
        let clean = forward_noise(&s, &z0, t, &DVector::zeros(4)).unwrap();
        assert_eq!(clean, &z0 * s.alpha_bar(t).sqrt());
        let tiny = NoiseSchedule::linear(2, 1e-12, 1e-12).unwrap();
        assert!((forward_noise(&tiny, &z0, 1, &eps).unwrap() - &z0).amax() < 1e-5);
        assert!(forward_noise(&s, &z0, 0, &eps).is_err());
        assert!(forward_noise(&s, &z0, 51, &eps).is_err());
    }

    #[test]
    fn loss_of_stub_models() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z0: Vec<DVector<f64>> = (0..5)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let batch: Vec<TrainingExample> = (0..5)
            .map(|i| TrainingExample {
                z0: z0[i].clone(),
                context: ConditioningContext::new(&[i as f64, 0.0], None).unwrap(),
            })
            .collect();
        let draws = NoiseDraw::sample(&mut rng, 5, 3, 10);
        let oracle = Oracle {
            schedule: s.clone(),
            z0,
        };
        assert!(bias_loss(&oracle, &s, &batch, &draws).unwrap() < 1e-24);
        let expected = draws.iter().map(|d| d.eps.norm_squared()).sum::<f64>() / 5.0;
        assert!((bias_loss(&Zero(3), &s, &batch, &draws).unwrap() - expected).abs() < 1e-14);
        assert!(bias_loss(&Zero(3), &s, &[], &[]).is_err());
    }

    #[test]
    fn two_step_sampling_matches_hand_arithmetic() {
        let s = NoiseSchedule::new(vec![0.1, 0.3]).unwrap();
        let seed = 42;
        let out = sample(&Zero(2), &s, &ctx(), 3, seed).unwrap();
        for (i, z) in out.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let g = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
            let z2 = [g(&mut rng), g(&mut rng)];
            let xi = [g(&mut rng), g(&mut rng)];
            for j in 0..2 {
                let z1 = z2[j] / 0.7f64.sqrt() + 0.3f64.sqrt() * xi[j];
                let z0 = z1 / 0.9f64.sqrt();
                assert!((z[j] - z0).abs() < 1e-14);
            }
        }
        assert_eq!(out, sample(&Zero(2), &s, &ctx(), 3, seed).unwrap());
        assert!(sample(&Zero(2), &s, &ctx(), 0, seed).unwrap().is_empty());
    }

    #[test]
    fn context_shapes() {
        let c = ConditioningContext::new(&[1.0, 2.0, 3.0], Some(&[0.5, 0.5, 0.5])).unwrap();
        assert_eq!((c.len(), c.dim()), (2, 3));
        assert!(c.has_special_token());
        assert!(!ctx().has_special_token());
        assert!(ConditioningContext::new(&[1.0, 2.0], Some(&[1.0])).is_err());
        assert_eq!(special_token(8, 1), special_token(8, 1));
        assert_ne!(special_token(8, 1), special_token(8, 2));
    }
}
