//! Named scenarios shipped with the repository.

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Scenario names and their TOML sources.
pub const SCENARIOS: [(&str, &str); 6] = [
    ("S1", include_str!("../../../../scenarios/s1.toml")),
    ("D1", include_str!("../../../../scenarios/d1.toml")),
    ("Q1", include_str!("../../../../scenarios/q1.toml")),
    ("Q2", include_str!("../../../../scenarios/q2.toml")),
    ("zero", include_str!("../../../../scenarios/zero.toml")),
    ("oracle", include_str!("../../../../scenarios/oracle.toml")),
];

/// Parses the named scenario (case-insensitive).
pub fn builtin(name: &str) -> Result<ExperimentConfig> {
    SCENARIOS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            let names: Vec<&str> = SCENARIOS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!(
                "unknown scenario `{name}`; known: {}",
                names.join(", ")
            ))
        })
        .and_then(|(_, text)| ExperimentConfig::from_toml_str(text))
}
