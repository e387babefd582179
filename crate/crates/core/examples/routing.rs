//! Verdict-driven routing: which expert mix each verdict selects, and the
//! per-prompt batch seeds used for sampling.

use moesd::gate::Verdict;
use moesd::moe::{batch_seed, route, RoutingTable};

fn main() -> moesd::Result<()> {
    let table = RoutingTable::default();
    table.validate()?;
    for verdict in [Verdict::Male, Verdict::Female, Verdict::None] {
        let w = route(verdict, &table);
        let parts: Vec<String> = w.0.iter().map(|(id, v)| format!("{id}={v}")).collect();
        println!("{verdict:<7} -> {}", parts.join(" "));
    }
    let json = serde_json::to_string_pretty(&table)?;
    println!("{json}");
    for label in ["doctor", "nurse"] {
        println!("batch seed for {label:?} at seed 7: {:#018x}", batch_seed(7, label));
    }
    Ok(())
}
