//! Gender-skew gate on the planted-bias fixture: skew, verdict and the
//! planted label for the first few occupations, then overall accuracy.
//!
//! cargo run --example gate -- [lambda]

use moesd::calibration::build_calibration;
use moesd::gate::{evaluate_gate, run_baseline_gate, run_gate, GateConfig};
use moesd::synthetic::{PlantedGateWorld, PlantedWorldConfig};

fn main() -> moesd::Result<()> {
    let lambda: f64 = std::env::args().nth(1).map_or(100.0, |s| s.parse().expect("lambda"));
    let world = PlantedGateWorld::generate(&PlantedWorldConfig::default())?;
    let cfg = GateConfig {
        lambda,
        ..GateConfig::default()
    };
    let c = build_calibration(&world.pairs, lambda)?;
    let decisions = run_gate(&world.inputs, &c, &cfg)?;
    for (i, d) in decisions.iter().take(10).enumerate() {
        println!(
            "{:<28} skew {:+.5} {:<6} planted {}",
            d.prompt_label,
            d.skew,
            d.verdict,
            world.truth(i)
        );
    }
    let baseline = run_baseline_gate(&world.inputs, cfg.similarity, cfg.threshold)?;
    println!(
        "calibrated gate accuracy   {:.3}",
        evaluate_gate(&decisions, &world.labels)?
    );
    println!(
        "uncalibrated accuracy      {:.3}",
        evaluate_gate(&baseline, &world.labels)?
    );
    Ok(())
}
