//! Gate accuracy over a λ grid on several planted worlds.

use moesd::gate::{best_lambda, sweep_lambda, GateConfig};
use moesd::synthetic::{PlantedGateWorld, PlantedWorldConfig};

fn main() -> moesd::Result<()> {
    let lambdas = [0.0, 0.1, 1.0, 10.0, 100.0, 1000.0, 4000.0];
    let gate = GateConfig::default();
    print!("{:>6}", "seed");
    for l in lambdas {
        print!(" {l:>7}");
    }
    println!("   best");
    for seed in 0..5 {
        let world = PlantedGateWorld::generate(&PlantedWorldConfig {
            seed,
            ..PlantedWorldConfig::default()
        })?;
        let rows = sweep_lambda(
            &world.pairs,
            &world.inputs,
            &world.labels,
            &lambdas,
            gate.similarity,
            gate.threshold,
        )?;
        print!("{seed:>6}");
        for r in &rows {
            print!(" {:>7.3}", r.accuracy);
        }
        println!("   {}", best_lambda(&rows).map_or(f64::NAN, |r| r.lambda));
    }
    Ok(())
}
