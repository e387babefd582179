//! Biased pre-training, bias experts and gated sampling on the toy world.
//!
//! Pass a JSON object to override config keys, e.g. `'{"seed": 3}'`.

use std::time::Instant;

use moesd::demo::run_demo;
use moesd::diffusion::ToyConfig;

fn main() -> moesd::Result<()> {
    let cfg: ToyConfig = match std::env::args().nth(1) {
        Some(json) => serde_json::from_str(&json)?,
        None => ToyConfig::default(),
    };
    let start = Instant::now();
    let run = run_demo(&cfg)?;
    let r = &run.report;
    println!(
        "pretrain loss   {:.4} -> {:.4}",
        r.pretrain.initial_loss, r.pretrain.final_loss
    );
    println!(
        "male expert     {:.4} -> {:.4}",
        r.male_expert.initial_loss, r.male_expert.final_loss
    );
    println!(
        "female expert   {:.4} -> {:.4}",
        r.female_expert.initial_loss, r.female_expert.final_loss
    );
    println!("gate accuracy   {:.3}", r.gate_accuracy);
    println!();
    // share of samples the oracle labels male
    let before = run.base_labels.counts();
    let after = run.samples.labels.counts();
    let share = |c: &Vec<u64>| c[0] as f64 / (c[0] + c[1]) as f64;
    println!("{:<28} {:>7} {:>7}  verdict", "concept", "before", "after");
    for d in &r.decisions {
        let o = d.prompt_label.as_str();
        println!(
            "{o:<28} {:>7.2} {:>7.2}  {}",
            share(&before[o]),
            share(&after[o]),
            d.verdict
        );
    }
    println!();
    println!("fairness score  {:.4} -> {:.4}", r.before.score, r.after.score);
    println!("elapsed         {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
