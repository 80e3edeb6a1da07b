//! Scenarios shipped with the crate.

use super::config::{ConfigError, ScenarioConfig};

macro_rules! bundle {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../../scenarios/", $name, ".toml")))),*]
    };
}

/// (name, TOML source) for every bundled scenario.
pub const BUNDLED: &[(&str, &str)] = bundle![
    "wrsu_happy_path",
    "wrsu_tampered_binary",
    "wrsu_impersonation",
    "insurance_honest",
    "insurance_tampered",
    "handover_crossover",
    "handover_sparse",
    "handover_flapping",
    "ddos",
    "byzantine_generator",
    "dtm_load_step",
    "trust_trend",
    "full_demo",
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

/// Parses a bundled scenario; `None` if no scenario has that name.
pub fn bundled(name: &str) -> Option<Result<ScenarioConfig, ConfigError>> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, src)| ScenarioConfig::from_toml(src))
}
