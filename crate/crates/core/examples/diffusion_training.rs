//! Pre-trains the toy denoiser on a biased world, samples one concept and
//! compares the sampled attribute share to the training mix.

use moesd::demo::pretrain_base;
use moesd::diffusion::{oracle_classify, sample, SyntheticWorld, ToyConfig};

fn main() -> moesd::Result<()> {
    let cfg = ToyConfig {
        steps: 20_000,
        ..ToyConfig::default()
    };
    let world = SyntheticWorld::generate(&cfg)?;
    let (model, report) = pretrain_base(&cfg, &world)?;
    println!(
        "pretrain {} steps, held-out loss {:.4} -> {:.4}",
        report.steps, report.initial_loss, report.final_loss
    );

    let schedule = cfg.schedule()?;
    for ci in 0..4 {
        let concept = &world.concepts[ci];
        let samples = sample(&model, &schedule, &world.context(ci, false)?, 200, 99)?;
        let male = samples
            .iter()
            .filter(|s| oracle_classify(&world, ci, s).map(|l| l == "male").unwrap_or(false))
            .count();
        println!(
            "{:<28} trained male share {:.2}, sampled {:.2}",
            concept.name,
            concept.p_first,
            male as f64 / samples.len() as f64
        );
    }
    Ok(())
}
