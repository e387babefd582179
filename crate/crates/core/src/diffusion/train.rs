use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{DenoiserGrad, MixedDenoiser, ToyDenoiser};
use super::world::SyntheticWorld;
use super::{forward_noise, NoiseDraw, NoiseSchedule, TrainingExample};
use crate::adapter::{BiasAdapter, ExpertWeights};
use crate::error::{Error, Result};

const EVAL_BATCH: usize = 256;

/// Plain gradient-descent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Loss on a fixed held-out batch before and after training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn add_scaled(acc: &mut DenoiserGrad, g: &DenoiserGrad) {
    if !g.w_in.is_empty() {
        acc.w_in += &g.w_in;
        acc.b_in += &g.b_in;
        for (a, b) in acc.attention.matrices_mut().into_iter().zip(g.attention.matrices()) {
            *a += b;
        }
        acc.w_out += &g.w_out;
        acc.b_out += &g.b_out;
    }
    for (id, ga) in &g.adapters {
        match acc.adapters.get_mut(id) {
            Some(a) => a.axpy(1.0, ga),
            None => {
                acc.adapters.insert(id.clone(), ga.clone());
            }
        }
    }
}

/// Batch loss and its gradient with respect to the adapters of every active
/// expert, plus the base weights when `want_base` is set.
pub fn bias_loss_grad(
    model: &ToyDenoiser,
    weights: &ExpertWeights,
    schedule: &NoiseSchedule,
    batch: &[TrainingExample],
    draws: &[NoiseDraw],
    want_base: bool,
) -> Result<(f64, DenoiserGrad)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::invalid("need a non-empty batch with one noise draw per example"));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut acc: Option<DenoiserGrad> = None;
    for (ex, d) in batch.iter().zip(draws) {
        let zt = forward_noise(schedule, &ex.z0, d.t, &d.eps)?;
        let (pred, cache) = model.forward_cached(weights, &zt, d.t, &ex.context)?;
        let resid = pred - &d.eps;
        loss += resid.norm_squared() * inv_n;
        let g = model.backward(&cache, &(resid * (2.0 * inv_n)), want_base)?;
        match acc.as_mut() {
            Some(a) => add_scaled(a, &g),
            None => acc = Some(g),
        }
    }
    if !loss.is_finite() {
        return Err(Error::Divergence("non-finite training loss".into()));
    }
    Ok((loss, acc.expect("non-empty batch")))
}

fn eval_set(
    world: &SyntheticWorld,
    schedule: &NoiseSchedule,
    k: usize,
    attribute: Option<usize>,
    special: bool,
    seed: u64,
) -> Result<(Vec<TrainingExample>, Vec<NoiseDraw>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c);
    let batch = world.batch(&mut rng, EVAL_BATCH, attribute, f64::from(u8::from(special)))?;
    let draws = NoiseDraw::sample(&mut rng, EVAL_BATCH, k, schedule.steps());
    Ok((batch, draws))
}

fn check_settings(s: &TrainSettings) -> Result<()> {
    if s.batch == 0 || !(s.lr.is_finite() && s.lr > 0.0) {
        return Err(Error::invalid("training needs batch >= 1 and a positive learning rate"));
    }
    Ok(())
}

/// Trains every base parameter of `model` on the full (biased) world. A
/// `token_rate` share of examples carries the special token.
pub fn pretrain(
    model: &mut ToyDenoiser,
    world: &SyntheticWorld,
    schedule: &NoiseSchedule,
    settings: &TrainSettings,
    token_rate: f64,
) -> Result<TrainReport> {
    check_settings(settings)?;
    let weights = ExpertWeights::original_only();
    let (eval_batch, eval_draws) = eval_set(world, schedule, model.k(), None, false, settings.seed)?;
    let initial_loss = super::bias_loss(&*model, schedule, &eval_batch, &eval_draws)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    for _ in 0..settings.steps {
        let batch = world.batch(&mut rng, settings.batch, None, token_rate)?;
        let draws = NoiseDraw::sample(&mut rng, settings.batch, model.k(), schedule.steps());
        let (_, g) = bias_loss_grad(model, &weights, schedule, &batch, &draws, true)?;
        let grads = [
            g.w_in.as_slice(),
            g.b_in.as_slice(),
            g.attention.w_q.as_slice(),
            g.attention.w_k.as_slice(),
            g.attention.w_v.as_slice(),
            g.attention.w_o.as_slice(),
            g.w_out.as_slice(),
            g.b_out.as_slice(),
        ];
        for (p, gp) in model.base_blocks_mut().into_iter().zip(grads) {
            p.iter_mut().zip(gp).for_each(|(p, g)| *p -= settings.lr * g);
        }
    }
    let final_loss = super::bias_loss(&*model, schedule, &eval_batch, &eval_draws)?;
    Ok(TrainReport {
        steps: settings.steps,
        initial_loss,
        final_loss,
    })
}

/// Fine-tunes a fresh adapter for `expert_id` on one attribute's cluster data
/// while the base weights stay frozen. Returns the trained adapter.
#[allow(clippy::too_many_arguments)]
pub fn train_expert(
    base: &ToyDenoiser,
    expert_id: &str,
    world: &SyntheticWorld,
    attribute: usize,
    special: bool,
    rank: usize,
    schedule: &NoiseSchedule,
    settings: &TrainSettings,
) -> Result<(BiasAdapter, TrainReport)> {
    check_settings(settings)?;
    if attribute >= world.attributes.len() {
        return Err(Error::invalid(format!("attribute index {attribute} out of range")));
    }
    let mut model = base.base_only();
    model.insert_adapter(expert_id, BiasAdapter::new(model.dims(), rank, settings.seed)?)?;
    let weights = ExpertWeights::from_pairs([(expert_id, 1.0)]);
    let (eval_batch, eval_draws) = eval_set(world, schedule, model.k(), Some(attribute), special, settings.seed)?;
    let eval = |m: &ToyDenoiser| {
        super::bias_loss(
            &MixedDenoiser {
                model: m,
                weights: &weights,
            },
            schedule,
            &eval_batch,
            &eval_draws,
        )
    };
    let initial_loss = eval(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    for _ in 0..settings.steps {
        let batch = world.batch(&mut rng, settings.batch, Some(attribute), f64::from(u8::from(special)))?;
        let draws = NoiseDraw::sample(&mut rng, settings.batch, model.k(), schedule.steps());
        let (_, g) = bias_loss_grad(&model, &weights, schedule, &batch, &draws, false)?;
        let adapter = model.adapter_mut(expert_id).expect("inserted above");
        adapter.axpy(-settings.lr, &g.adapters[expert_id]);
    }
    let final_loss = eval(&model)?;
    let adapter = model.adapter(expert_id).expect("inserted above").clone();
    if !adapter.is_finite() {
        return Err(Error::Divergence(format!("expert {expert_id} has non-finite weights")));
    }
    Ok((
        adapter,
        TrainReport {
            steps: settings.steps,
            initial_loss,
            final_loss,
        },
    ))
}
