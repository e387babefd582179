//! Regenerates the committed fixtures: a planted-bias gate world as EMBD
//! files plus label CSVs and small configs for the command-line tests.
//!
//! cargo run --example make_fixtures -- [dir]

use std::path::PathBuf;

use moesd::diffusion::ToyConfig;
use moesd::embedding::{save_embedding_set, AttributeSet};
use moesd::fairness::LabelTable;
use moesd::moe::PipelineConfig;
use moesd::synthetic::{PlantedGateWorld, PlantedWorldConfig};

fn main() -> moesd::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    std::fs::create_dir_all(&dir).expect("create fixture dir");

    let world = PlantedGateWorld::generate(&PlantedWorldConfig::default())?;
    save_embedding_set(&world.pair_set, dir.join("planted_pairs.embd"))?;
    save_embedding_set(world.inputs.prompts(), dir.join("planted_prompts.embd"))?;
    save_embedding_set(world.inputs.male(), dir.join("planted_male.embd"))?;
    save_embedding_set(world.inputs.female(), dir.join("planted_female.embd"))?;
    world
        .labels
        .write_csv(std::fs::File::create(dir.join("planted_labels.csv")).expect("create labels"))?;

    let mut all_male = LabelTable::new(AttributeSet::gender());
    let mut mixed = LabelTable::new(AttributeSet::gender());
    for occ in ["doctor", "nurse", "pilot"] {
        for i in 0..10 {
            all_male.push(occ, i.to_string(), "male")?;
        }
    }
    // 7/3, 2/8 and 5/5 with one unknown
    for (occ, males, females) in [("doctor", 7, 3), ("nurse", 2, 8), ("pilot", 5, 5)] {
        for i in 0..males + females {
            let label = if i < males { "male" } else { "female" };
            mixed.push(occ, i.to_string(), label)?;
        }
    }
    mixed.push("pilot", "10", "unknown")?;
    all_male.write_csv(std::fs::File::create(dir.join("all_male_labels.csv")).expect("create csv"))?;
    mixed.write_csv(std::fs::File::create(dir.join("mixed_labels.csv")).expect("create csv"))?;

    let tiny = ToyConfig {
        k: 3,
        d_c: 8,
        d_h: 6,
        d_x: 8,
        rank: 2,
        steps_t: 10,
        steps: 200,
        expert_steps: 50,
        concepts: 4,
        samples_per_concept: 20,
        ..ToyConfig::default()
    };
    write_json(&dir.join("toy_tiny.json"), &tiny);
    write_json(&dir.join("pipeline.json"), &PipelineConfig::default());
    println!("fixtures written to {}", dir.display());
    Ok(())
}

fn write_json(path: &std::path::Path, value: &impl serde::Serialize) {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).expect("write json");
}
