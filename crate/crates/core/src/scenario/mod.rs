//! Scenario configs, the simulated world and trace-derived reports.

mod config;
mod library;
mod report;
mod world;

pub use config::{
    parse_vehicle_name, vehicle_name, CloudConfig, ConfigError, Directive, ImpersonationMode, NetworkConfig,
    ScenarioConfig, TopologyConfig, VehicleBehavior,
};
pub use library::{bundled, bundled_names, BUNDLED};
pub use report::{Check, MissingHeader, ScenarioReport, METRICS};
pub use world::{Msg, Timer, World};

use crate::simnet::{RunOutcome, Trace};

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct ScenarioRun {
    pub trace: Trace,
    pub report: ScenarioReport,
    pub outcome: RunOutcome,
}

/// Validates, simulates and scores one scenario.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun, ConfigError> {
    let (world, outcome) = run_world(cfg)?;
    let report = ScenarioReport::from_trace(&world.trace).expect("world always writes a header");
    Ok(ScenarioRun { trace: world.trace, report, outcome })
}

/// Runs a scenario and hands back the final world for inspection.
pub fn run_world(cfg: &ScenarioConfig) -> Result<(World, RunOutcome), ConfigError> {
    cfg.validate()?;
    let (mut world, mut net) = World::build(cfg);
    world.start(&mut net);
    let outcome = net.run_until_quiescent(&mut world, cfg.max_time);
    world.finish(&outcome);
    Ok((world, outcome))
}
