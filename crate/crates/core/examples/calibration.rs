//! Closed-form calibration matrix from prompt pairs, and how strongly it
//! squashes the pair differences as λ grows.
//!
//! cargo run --example calibration -- [pairs.embd]

use moesd::calibration::{build_calibration, calibration_residual, PromptPairSet};
use moesd::embedding::load_embedding_set;

fn main() -> moesd::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/planted_pairs.embd").to_owned());
    let pairs = PromptPairSet::from_embedding_set(&load_embedding_set(&path)?)?;
    println!("{} pairs, d = {}", pairs.len(), pairs.dim());
    println!("{:>8} {:>14} {:>14}", "lambda", "mean |C d|/|d|", "residual");
    for lambda in [0.0, 1.0, 10.0, 100.0, 1000.0, 4000.0] {
        let c = build_calibration(&pairs, lambda)?;
        let shrink: f64 = pairs
            .differences()
            .map(|d| (c.matrix() * &d).norm() / d.norm())
            .sum::<f64>()
            / pairs.len() as f64;
        println!("{lambda:>8} {shrink:>14.6} {:>14.2e}", calibration_residual(&pairs, &c));
    }
    Ok(())
}
