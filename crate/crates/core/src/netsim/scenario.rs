//! Scenario files: link parameters, endpoint schemas and scripted activity.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{Endpoint, Tick};
use crate::trace::Mode;
use crate::transaction::{FieldKey, FieldWrite, SCHEMA_VERSIONS};

/// Longest horizon a scenario may ask for.
pub const MAX_HORIZON: Tick = 100_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkParams {
    pub one_way_delay: Tick,
    pub frame_tx_time: Tick,
    pub loss_prob: f64,
    pub dup_prob: f64,
    pub reorder_prob: f64,
    pub corrupt_prob: f64,
    /// Ticks an open state may last; four one-way delays when absent.
    pub timeout: Option<Tick>,
    /// Baseline only: retries per field before fail-stop.
    pub max_retries: u32,
    pub hyperdata: bool,
    pub hyperdata_start: Endpoint,
}

impl Default for LinkParams {
    fn default() -> LinkParams {
        LinkParams {
            one_way_delay: 5,
            frame_tx_time: 3,
            loss_prob: 0.01,
            dup_prob: 0.005,
            reorder_prob: 0.005,
            corrupt_prob: 0.001,
            timeout: None,
            max_retries: 3,
            hyperdata: false,
            hyperdata_start: Endpoint::A,
        }
    }
}

impl LinkParams {
    /// A link that never drops, duplicates, reorders or corrupts.
    pub fn fault_free(one_way_delay: Tick, frame_tx_time: Tick) -> LinkParams {
        LinkParams {
            one_way_delay,
            frame_tx_time,
            loss_prob: 0.0,
            dup_prob: 0.0,
            reorder_prob: 0.0,
            corrupt_prob: 0.0,
            ..LinkParams::default()
        }
    }

    pub fn timeout(&self) -> Tick {
        self.timeout.unwrap_or(4 * self.one_way_delay)
    }

    pub fn is_fault_free(&self) -> bool {
        [self.loss_prob, self.dup_prob, self.reorder_prob, self.corrupt_prob].iter().all(|p| *p == 0.0)
    }

    fn problems(&self, out: &mut Vec<String>) {
        if self.one_way_delay == 0 {
            out.push("link.one_way_delay must be at least 1".into());
        }
        if self.frame_tx_time == 0 {
            out.push("link.frame_tx_time must be at least 1".into());
        }
        for (name, p) in [
            ("loss_prob", self.loss_prob),
            ("dup_prob", self.dup_prob),
            ("reorder_prob", self.reorder_prob),
            ("corrupt_prob", self.corrupt_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("link.{name} must lie in [0, 1], got {p}"));
            }
        }
        if let Some(t) = self.timeout {
            if t <= 2 * self.one_way_delay {
                out.push(format!(
                    "link.timeout {t} must exceed the round trip {}",
                    2 * self.one_way_delay
                ));
            }
        }
    }
}

/// Perfect information feedback: the reflection is back at the sender
/// before the sender has finished putting the frame on the wire.
pub fn pif_condition(params: &LinkParams) -> bool {
    2 * params.one_way_delay < params.frame_tx_time
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u8,
}

fn default_schema() -> u8 {
    1
}

impl Default for EndpointConfig {
    fn default() -> EndpointConfig {
        EndpointConfig { schema_version: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    #[serde(default)]
    pub a: EndpointConfig,
    #[serde(default)]
    pub b: EndpointConfig,
}

impl Endpoints {
    pub fn schema(&self, ep: Endpoint) -> u8 {
        match ep {
            Endpoint::A => self.a.schema_version,
            Endpoint::B => self.b.schema_version,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptInitiate {
    pub endpoint: Endpoint,
    pub at: Tick,
    pub writes: Vec<FieldWrite>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRead {
    pub endpoint: Endpoint,
    pub at: Tick,
    pub keys: Vec<FieldKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub horizon: Tick,
    #[serde(default)]
    pub link: LinkParams,
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default)]
    pub initiate: Vec<ScriptInitiate>,
    #[serde(default)]
    pub read: Vec<ScriptRead>,
}

fn default_mode() -> Mode {
    Mode::Oae
}

/// Every problem found in a scenario, not just the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    pub problems: Vec<String>,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid scenario:")?;
        for p in &self.problems {
            write!(f, "\n  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ScenarioError {}

impl Scenario {
    /// An empty scenario on `link`.
    pub fn new(name: impl Into<String>, horizon: Tick, link: LinkParams) -> Scenario {
        Scenario {
            name: name.into(),
            mode: Mode::Oae,
            seed: 0,
            horizon,
            link,
            endpoints: Endpoints::default(),
            initiate: Vec::new(),
            read: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError { problems: vec![e.to_string()] })?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios serialize")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut out = Vec::new();
        if self.name.trim().is_empty() {
            out.push("name must not be empty".into());
        }
        if self.horizon == 0 || self.horizon > MAX_HORIZON {
            out.push(format!("horizon must lie in 1..={MAX_HORIZON}, got {}", self.horizon));
        }
        self.link.problems(&mut out);
        for ep in Endpoint::BOTH {
            let s = self.endpoints.schema(ep);
            if !SCHEMA_VERSIONS.contains(&s) {
                out.push(format!("endpoints.{}.schema_version {s} is unknown", ep.to_string().to_lowercase()));
            }
        }
        for (i, init) in self.initiate.iter().enumerate() {
            if init.at >= self.horizon {
                out.push(format!("initiate[{i}].at {} is not before the horizon", init.at));
            }
            if init.writes.is_empty() || init.writes.len() > usize::from(u8::MAX) {
                out.push(format!("initiate[{i}] must carry 1..=255 writes"));
            }
            let mut keys: Vec<FieldKey> = init.writes.iter().map(|w| w.key).collect();
            keys.sort_unstable();
            if keys.windows(2).any(|w| w[0] == w[1]) {
                out.push(format!("initiate[{i}] writes the same key twice"));
            }
        }
        for (i, r) in self.read.iter().enumerate() {
            if r.at >= self.horizon {
                out.push(format!("read[{i}].at {} is not before the horizon", r.at));
            }
            if r.keys.is_empty() {
                out.push(format!("read[{i}] names no keys"));
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError { problems: out })
        }
    }
}
