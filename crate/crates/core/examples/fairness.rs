//! Fairness score of a label CSV, as a table and as JSON.
//!
//! cargo run --example fairness -- [labels.csv]

use moesd::embedding::AttributeSet;
use moesd::fairness::{fairness_score, LabelTable};

fn main() -> moesd::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/mixed_labels.csv").to_owned());
    let table = LabelTable::load(&path, AttributeSet::gender())?;
    let report = fairness_score(&table, "male")?;
    print!("{}", report.render_table());
    println!("{}", report.to_json()?);

    let tones = AttributeSet::skin_tone();
    let mut t = LabelTable::new(tones.clone());
    for (i, label) in tones.names().iter().enumerate() {
        for j in 0..=i {
            t.push("painter", format!("{i}-{j}"), label.clone())?;
        }
    }
    println!("skin tone score {:.4}", fairness_score(&t, &tones.names()[0])?.score);
    Ok(())
}
