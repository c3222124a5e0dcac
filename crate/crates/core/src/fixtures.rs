//! Bundled resource populations.

use crate::resources::{read_population_csv, ResourceRecord};

/// 40 smartphone users surveyed for processing speed, upload rate and memory.
pub const SMARTPHONES_40_CSV: &str = include_str!("../fixtures/smartphones_40.csv");

/// A ten-participant toy population on an arbitrary resource scale.
pub const EXAMPLE_10_CSV: &str = include_str!("../fixtures/example_10.csv");

pub fn smartphones_40() -> Vec<ResourceRecord> {
    read_population_csv(SMARTPHONES_40_CSV.as_bytes()).expect("bundled fixture parses")
}

pub fn example_10() -> Vec<ResourceRecord> {
    read_population_csv(EXAMPLE_10_CSV.as_bytes()).expect("bundled fixture parses")
}

/// Resolves a bundled population by name.
pub fn by_name(name: &str) -> Option<Vec<ResourceRecord>> {
    match name {
        "smartphones_40" => Some(smartphones_40()),
        "example_10" => Some(example_10()),
        _ => None,
    }
}
