//! Scenario file schema and its validating loader.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::LedgerParams;
use crate::vehicle::VehicleParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Syntax(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    /// Periodic activity (records, anchors, load, block turns with a short
    /// pool) stops here; the run then drains.
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Hard stop; reaching it with events left is a non-quiescent run.
    #[serde(default = "default_max_time")]
    pub max_time: f64,
    #[serde(default)]
    pub ledger: LedgerParams,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub vehicles: VehicleBehavior,
    #[serde(default)]
    pub cloud: CloudConfig,
    #[serde(default)]
    pub script: Vec<Directive>,
    /// Metric name -> exact expected value.
    #[serde(default)]
    pub expect: BTreeMap<String, f64>,
    #[serde(default)]
    pub expect_min: BTreeMap<String, f64>,
    #[serde(default)]
    pub expect_max: BTreeMap<String, f64>,
}

fn default_duration() -> f64 {
    200.0
}

fn default_max_time() -> f64 {
    20_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Each sampled delay is `base * (1 + jitter * u)`, `u` uniform in [0, 1).
    pub jitter: f64,
    /// Between block managers.
    pub obm_delay: f64,
    /// Between a member and its own block manager.
    pub member_delay: f64,
    /// Between a member and every other block manager.
    pub far_delay: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { jitter: 0.1, obm_delay: 0.1, member_delay: 2.0, far_delay: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub obms: usize,
    pub vehicles: usize,
    /// Indices of block managers that forge transactions in their blocks.
    pub byzantine: Vec<usize>,
    /// Explicit manager index per vehicle; round-robin when empty.
    pub vehicle_obm: Vec<usize>,
    pub oem_obm: usize,
    pub provider_obm: usize,
    pub insurer_obm: usize,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            obms: 4,
            vehicles: 20,
            byzantine: Vec::new(),
            vehicle_obm: Vec::new(),
            oem_obm: 0,
            provider_obm: 1,
            insurer_obm: 2,
        }
    }
}

impl TopologyConfig {
    pub fn obm_of_vehicle(&self, i: usize) -> usize {
        self.vehicle_obm.get(i).copied().unwrap_or(i % self.obms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleBehavior {
    pub anchor_interval: f64,
    pub handover_threshold: f64,
    pub hysteresis: f64,
    pub probe_count: usize,
    pub rotate_per_interaction: bool,
    /// Time between sensor records; 0 disables recording.
    pub record_interval: f64,
    /// Time between backup transfers; 0 disables them.
    pub backup_interval: f64,
    /// Time between delay probes; 0 disables handover.
    pub handover_interval: f64,
    /// Latency between an update notice and the finished download.
    pub download_delay: f64,
    /// Time between driving-data uploads to the insurer's cloud account.
    pub upload_interval: f64,
}

impl Default for VehicleBehavior {
    fn default() -> Self {
        let p = VehicleParams::default();
        VehicleBehavior {
            anchor_interval: p.anchor_interval,
            handover_threshold: p.handover_threshold,
            hysteresis: p.hysteresis,
            probe_count: p.probe_count,
            rotate_per_interaction: p.rotate_per_interaction,
            record_interval: 5.0,
            backup_interval: 0.0,
            handover_interval: 0.0,
            download_delay: 2.0,
            upload_interval: 10.0,
        }
    }
}

impl VehicleBehavior {
    pub fn params(&self) -> VehicleParams {
        VehicleParams {
            anchor_interval: self.anchor_interval,
            handover_threshold: self.handover_threshold,
            hysteresis: self.hysteresis,
            probe_count: self.probe_count,
            rotate_per_interaction: self.rotate_per_interaction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudConfig {
    /// Keep a closed account's objects.
    pub retain_on_close: bool,
}

impl Default for CloudConfig {
    fn default() -> Self {
        CloudConfig { retain_on_close: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpersonationMode {
    /// Fully signed update made with two attacker keys.
    SelfSigned,
    /// Claims the OEM as second signer with a signature it cannot produce.
    ForgedOem,
    /// Pending update sent to the OEM from an uncertified key.
    RogueProvider,
}

fn one() -> usize {
    1
}

fn default_binary_size() -> usize {
    4096
}

fn default_attack_interval() -> f64 {
    0.05
}

/// One timed script step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Directive {
    PublishUpdate {
        at: f64,
        ecu: String,
        version: String,
        #[serde(default = "default_binary_size")]
        size: usize,
    },
    TamperCloudObject {
        at: f64,
        object: String,
        /// Wait until the OEM has countersigned before rewriting.
        #[serde(default)]
        after_approval: bool,
    },
    ImpersonateUpdate {
        at: f64,
        mode: ImpersonationMode,
        ecu: String,
        version: String,
    },
    StartDdos {
        at: f64,
        attackers: usize,
        tx_per_attacker: usize,
        target: String,
        #[serde(default = "default_attack_interval")]
        interval: f64,
        /// Attackers whose key pair the target uploaded.
        #[serde(default)]
        authorized: usize,
    },
    OpenAccount {
        at: f64,
        vehicle: String,
    },
    CloseAccount {
        at: f64,
        vehicle: String,
    },
    TriggerAccident {
        at: f64,
        vehicle: String,
        #[serde(default)]
        tamper_claim: bool,
    },
    /// Sets the vehicle's delay to each block manager, by index.
    MoveVehicle {
        at: f64,
        vehicle: String,
        delays: Vec<f64>,
    },
    /// Background single-signature traffic, transactions per time unit.
    SetLoad {
        at: f64,
        rate: f64,
    },
    /// OEM sends transactions addressed to a vehicle.
    SendAddressed {
        at: f64,
        vehicle: String,
        #[serde(default = "one")]
        count: usize,
    },
}

impl Directive {
    pub fn at(&self) -> f64 {
        match self {
            Directive::PublishUpdate { at, .. }
            | Directive::TamperCloudObject { at, .. }
            | Directive::ImpersonateUpdate { at, .. }
            | Directive::StartDdos { at, .. }
            | Directive::OpenAccount { at, .. }
            | Directive::CloseAccount { at, .. }
            | Directive::TriggerAccident { at, .. }
            | Directive::MoveVehicle { at, .. }
            | Directive::SetLoad { at, .. }
            | Directive::SendAddressed { at, .. } => *at,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Directive::PublishUpdate { .. } => "publish_update",
            Directive::TamperCloudObject { .. } => "tamper_cloud_object",
            Directive::ImpersonateUpdate { .. } => "impersonate_update",
            Directive::StartDdos { .. } => "start_ddos",
            Directive::OpenAccount { .. } => "open_account",
            Directive::CloseAccount { .. } => "close_account",
            Directive::TriggerAccident { .. } => "trigger_accident",
            Directive::MoveVehicle { .. } => "move_vehicle",
            Directive::SetLoad { .. } => "set_load",
            Directive::SendAddressed { .. } => "send_addressed",
        }
    }

    fn vehicle(&self) -> Option<&str> {
        match self {
            Directive::OpenAccount { vehicle, .. }
            | Directive::CloseAccount { vehicle, .. }
            | Directive::TriggerAccident { vehicle, .. }
            | Directive::MoveVehicle { vehicle, .. }
            | Directive::SendAddressed { vehicle, .. } => Some(vehicle),
            Directive::StartDdos { target, .. } => Some(target),
            _ => None,
        }
    }
}

/// Vehicle names are `v0`, `v1`, ...
pub fn vehicle_name(i: usize) -> String {
    format!("v{i}")
}

pub fn parse_vehicle_name(name: &str, count: usize) -> Option<usize> {
    let i: usize = name.strip_prefix('v')?.parse().ok()?;
    (i < count && vehicle_name(i) == name).then_some(i)
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negated so NaN fails too
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if !(self.duration > 0.0) {
            return Err(invalid("duration", "must be positive"));
        }
        if !(self.max_time >= self.duration) {
            return Err(invalid("max_time", "must be at least duration"));
        }
        self.ledger.check().map_err(|(f, m)| invalid(format!("ledger.{f}"), m))?;
        self.validate_network()?;
        self.validate_topology()?;
        self.validate_vehicles()?;
        self.validate_script()?;
        let known: BTreeSet<&str> = super::report::METRICS.iter().copied().collect();
        for (table, map) in
            [("expect", &self.expect), ("expect_min", &self.expect_min), ("expect_max", &self.expect_max)]
        {
            for key in map.keys() {
                let family = key.split_once('.').map(|(base, _)| format!("{base}.*"));
                if !known.contains(key.as_str()) && !family.is_some_and(|f| known.contains(f.as_str())) {
                    return Err(invalid(format!("{table}.{key}"), "unknown metric"));
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negated so NaN fails too
    fn validate_network(&self) -> Result<(), ConfigError> {
        let n = &self.network;
        if !(0.0..1.0).contains(&n.jitter) {
            return Err(invalid("network.jitter", "must lie in [0, 1)"));
        }
        for (field, v) in [
            ("network.obm_delay", n.obm_delay),
            ("network.member_delay", n.member_delay),
            ("network.far_delay", n.far_delay),
        ] {
            if !(v > 0.0) {
                return Err(invalid(field, "delays must be positive"));
            }
        }
        // A block must reach every peer before the next turn starts, or the
        // next manager builds on a stale head.
        let slot = self.ledger.period_min / self.topology.obms.max(1) as f64;
        let worst = n.obm_delay * (1.0 + n.jitter);
        if worst >= slot {
            return Err(invalid(
                "network.obm_delay",
                format!("worst-case delay {worst} must be below the shortest block slot {slot} (period_min / obms)"),
            ));
        }
        Ok(())
    }

    fn validate_topology(&self) -> Result<(), ConfigError> {
        let t = &self.topology;
        if t.obms == 0 {
            return Err(invalid("topology.obms", "need at least one block manager"));
        }
        for (field, idx) in [
            ("topology.oem_obm", t.oem_obm),
            ("topology.provider_obm", t.provider_obm),
            ("topology.insurer_obm", t.insurer_obm),
        ] {
            if idx >= t.obms {
                return Err(invalid(field, format!("no block manager {idx}")));
            }
        }
        for (i, &b) in t.byzantine.iter().enumerate() {
            if b >= t.obms {
                return Err(invalid(format!("topology.byzantine[{i}]"), format!("no block manager {b}")));
            }
        }
        if t.byzantine.len() >= t.obms {
            return Err(invalid("topology.byzantine", "at least one block manager must be honest"));
        }
        for role_obm in [t.oem_obm, t.provider_obm, t.insurer_obm] {
            if t.byzantine.contains(&role_obm) {
                return Err(invalid("topology.byzantine", "service actors must attach to honest block managers"));
            }
        }
        if !t.vehicle_obm.is_empty() && t.vehicle_obm.len() != t.vehicles {
            return Err(invalid("topology.vehicle_obm", "one entry per vehicle"));
        }
        for (i, &o) in t.vehicle_obm.iter().enumerate() {
            if o >= t.obms {
                return Err(invalid(format!("topology.vehicle_obm[{i}]"), format!("no block manager {o}")));
            }
        }
        Ok(())
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negated so NaN fails too
    fn validate_vehicles(&self) -> Result<(), ConfigError> {
        let v = &self.vehicles;
        if !(v.anchor_interval > 0.0) {
            return Err(invalid("vehicles.anchor_interval", "must be positive"));
        }
        if !(v.handover_threshold > 0.0) {
            return Err(invalid("vehicles.handover_threshold", "must be positive"));
        }
        if !(0.0..1.0).contains(&v.hysteresis) {
            return Err(invalid("vehicles.hysteresis", "must lie in [0, 1)"));
        }
        if v.probe_count == 0 {
            return Err(invalid("vehicles.probe_count", "must be at least 1"));
        }
        for (field, x) in [
            ("vehicles.record_interval", v.record_interval),
            ("vehicles.backup_interval", v.backup_interval),
            ("vehicles.handover_interval", v.handover_interval),
            ("vehicles.download_delay", v.download_delay),
        ] {
            if !(x >= 0.0) {
                return Err(invalid(field, "must not be negative"));
            }
        }
        if !(v.upload_interval > 0.0) {
            return Err(invalid("vehicles.upload_interval", "must be positive"));
        }
        Ok(())
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negated so NaN fails too
    fn validate_script(&self) -> Result<(), ConfigError> {
        let n = self.topology.vehicles;
        for (i, d) in self.script.iter().enumerate() {
            let field = |f: &str| format!("script[{i}].{f}");
            if !(d.at() >= 0.0 && d.at() <= self.duration) {
                return Err(invalid(field("at"), "must lie in [0, duration]"));
            }
            if let Some(v) = d.vehicle() {
                if parse_vehicle_name(v, n).is_none() {
                    let key = if matches!(d, Directive::StartDdos { .. }) { "target" } else { "vehicle" };
                    return Err(invalid(
                        field(key),
                        format!("unknown vehicle {v:?} (have v0..v{})", n.saturating_sub(1)),
                    ));
                }
            }
            match d {
                Directive::PublishUpdate { ecu, version, size, .. } => {
                    check_label(&field("ecu"), ecu)?;
                    check_label(&field("version"), version)?;
                    if *size == 0 {
                        return Err(invalid(field("size"), "must be at least 1"));
                    }
                }
                Directive::ImpersonateUpdate { ecu, version, .. } => {
                    check_label(&field("ecu"), ecu)?;
                    check_label(&field("version"), version)?;
                }
                Directive::StartDdos { attackers, tx_per_attacker, interval, authorized, .. } => {
                    if *attackers == 0 {
                        return Err(invalid(field("attackers"), "must be at least 1"));
                    }
                    if *authorized > *attackers {
                        return Err(invalid(field("authorized"), "cannot exceed attackers"));
                    }
                    if *tx_per_attacker == 0 {
                        return Err(invalid(field("tx_per_attacker"), "must be at least 1"));
                    }
                    if !(*interval > 0.0) {
                        return Err(invalid(field("interval"), "must be positive"));
                    }
                }
                Directive::MoveVehicle { delays, .. } => {
                    if delays.len() != self.topology.obms {
                        return Err(invalid(
                            field("delays"),
                            format!("need one delay per block manager ({})", self.topology.obms),
                        ));
                    }
                    if delays.iter().any(|d| !(*d > 0.0)) {
                        return Err(invalid(field("delays"), "delays must be positive"));
                    }
                }
                Directive::SetLoad { rate, .. } => {
                    if !(*rate >= 0.0) {
                        return Err(invalid(field("rate"), "must not be negative"));
                    }
                }
                Directive::SendAddressed { count, .. } => {
                    if *count == 0 {
                        return Err(invalid(field("count"), "must be at least 1"));
                    }
                }
                Directive::TamperCloudObject { object, .. } => {
                    if object.is_empty() {
                        return Err(invalid(field("object"), "must not be empty"));
                    }
                }
                Directive::OpenAccount { .. } | Directive::CloseAccount { .. } | Directive::TriggerAccident { .. } => {}
            }
        }
        Ok(())
    }

    pub fn attacker_count(&self) -> usize {
        self.script
            .iter()
            .map(|d| match d {
                Directive::StartDdos { attackers, .. } => *attackers,
                Directive::ImpersonateUpdate { .. } => 1,
                _ => 0,
            })
            .sum()
    }
}

fn check_label(field: &str, s: &str) -> Result<(), ConfigError> {
    if s.is_empty() || s.contains(['\n', '/']) {
        return Err(invalid(field, "must be non-empty without '/' or newlines"));
    }
    Ok(())
}
