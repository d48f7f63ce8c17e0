//! A live device: takes typed commands, asks the backend, and applies or
//! explains. Nothing the backend emits can leave the device in an invalid
//! snapshot; rejected commands leave the state untouched and are logged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Duration as ChronoDuration, Utc};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl;
use crate::snapshot_gen::seeded_rng;
use crate::state_model::{
    apply_action, read_sensor, validate_action, ApplyError, DeviceModel, SensorError,
    SensorSource, Snapshot, ValueRange,
};
use crate::wire::{
    parse_completion, render_action_prompt, render_explanation_prompt, GenerationBackend, Parsed,
    PromptKind,
};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("command text is empty")]
    EmptyCommand,
    #[error("could not read sensors at boot: {0}")]
    Boot(#[from] SensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Applied,
    Explained,
    RejectedInvalid,
    RejectedParse,
}

impl Outcome {
    pub fn is_rejected(self) -> bool {
        matches!(self, Outcome::RejectedInvalid | Outcome::RejectedParse)
    }
}

/// Where in the pipeline a command failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventError {
    pub stage: String,
    pub code: String,
    pub detail: String,
}

impl EventError {
    fn new(stage: &str, code: &str, detail: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            code: code.into(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub command: String,
    pub kind: PromptKind,
    pub raw_output: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<EventError>,
    /// Backend call plus parsing and validation.
    pub latency_ms: u64,
    pub before: Snapshot,
    pub after: Snapshot,
}

/// How one simulated sensor behaves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorSim {
    Fixed(i64),
    /// Random walk: each reading moves by at most `max_step`, clamped to range.
    Drift { start: i64, max_step: i64 },
}

/// Stand-in for hardware sensors. Unconfigured sensors read the midpoint of
/// their range.
#[derive(Debug, Clone)]
pub struct SimulatedSensors {
    sims: BTreeMap<String, SensorSim>,
    last: BTreeMap<String, i64>,
    rng: ChaCha8Rng,
}

impl Default for SimulatedSensors {
    fn default() -> Self {
        Self::new(BTreeMap::new(), 0)
    }
}

impl SimulatedSensors {
    pub fn new(sims: BTreeMap<String, SensorSim>, seed: u64) -> Self {
        Self {
            sims,
            last: BTreeMap::new(),
            rng: seeded_rng(seed),
        }
    }

    pub fn fixed(name: &str, value: i64) -> Self {
        Self::new(BTreeMap::from([(name.to_string(), SensorSim::Fixed(value))]), 0)
    }

    pub fn drifting(name: &str, start: i64, max_step: i64, seed: u64) -> Self {
        Self::new(
            BTreeMap::from([(name.to_string(), SensorSim::Drift { start, max_step })]),
            seed,
        )
    }
}

impl SensorSource for SimulatedSensors {
    fn read(&mut self, name: &str, range: ValueRange) -> Result<i64, SensorError> {
        let value = match self.sims.get(name).copied() {
            None => range.min + (range.max - range.min) / 2,
            Some(SensorSim::Fixed(v)) => v,
            Some(SensorSim::Drift { start, max_step }) => match self.last.get(name) {
                None => start,
                Some(prev) => {
                    let step = max_step.abs();
                    prev + self.rng.random_range(-step..=step)
                }
            },
        };
        let value = range.clamp(value);
        self.last.insert(name.to_string(), value);
        Ok(value)
    }
}

/// Pushes applied snapshots to hardware or a display.
pub trait Actuator: Send {
    fn actuate(&mut self, snapshot: &Snapshot);
}

/// Keeps the most recently actuated snapshot for a visual front end.
#[derive(Debug, Clone, Default)]
pub struct SimulatedActuator {
    pub shown: Option<Snapshot>,
}

impl Actuator for SimulatedActuator {
    fn actuate(&mut self, snapshot: &Snapshot) {
        self.shown = Some(snapshot.clone());
    }
}

pub struct DeviceInstance {
    model: DeviceModel,
    current: Snapshot,
    sensors: Box<dyn SensorSource>,
    actuator: Box<dyn Actuator>,
    events: Vec<CommandEvent>,
    error_log: Option<PathBuf>,
}

impl std::fmt::Debug for DeviceInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceInstance")
            .field("device", &self.model.device_name())
            .field("current", &self.current)
            .field("events", &self.events.len())
            .finish()
    }
}

impl DeviceInstance {
    /// Boots into the initial state with default settings and one sensor read.
    pub fn new(model: DeviceModel, mut sensors: Box<dyn SensorSource>) -> Result<Self, RuntimeError> {
        let state = model.initial_state().to_string();
        let template = model.template(&state).expect("initial state is declared");
        let mut current = Snapshot::new(state.clone());
        for name in template.settings.keys() {
            current.values.insert(name.clone(), model.defaults()[name]);
        }
        for (name, range) in &template.sensors {
            let v = read_sensor(sensors.as_mut(), name, *range)?;
            current.values.insert(name.clone(), v);
        }
        Ok(Self {
            model,
            current,
            sensors,
            actuator: Box::new(SimulatedActuator::default()),
            events: Vec::new(),
            error_log: None,
        })
    }

    pub fn simulated(model: DeviceModel) -> Self {
        Self::new(model, Box::new(SimulatedSensors::default())).expect("simulation is total")
    }

    pub fn with_actuator(mut self, actuator: Box<dyn Actuator>) -> Self {
        self.actuator = actuator;
        self
    }

    /// Rejected commands are appended to this JSONL file.
    pub fn with_error_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.error_log = Some(path.into());
        self
    }

    pub fn model(&self) -> &DeviceModel {
        &self.model
    }

    pub fn current(&self) -> &Snapshot {
        &self.current
    }

    pub fn events(&self) -> &[CommandEvent] {
        &self.events
    }

    pub fn error_log(&self) -> Option<&Path> {
        self.error_log.as_deref()
    }

    /// Refreshes every sensor of the current state. A failed reading keeps
    /// the previous value.
    pub fn read_sensors(&mut self) -> BTreeMap<String, i64> {
        let template = self
            .model
            .template(&self.current.state)
            .expect("current state is declared");
        let mut out = BTreeMap::new();
        for (name, range) in &template.sensors {
            match read_sensor(self.sensors.as_mut(), name, *range) {
                Ok(v) => {
                    self.current.values.insert(name.clone(), v);
                }
                Err(e) => log::warn!("keeping previous `{name}` reading: {e}"),
            }
            out.insert(name.clone(), self.current.values[name]);
        }
        out
    }

    fn next_timestamp(&self) -> DateTime<Utc> {
        let now = Utc::now();
        match self.events.last() {
            Some(prev) if now <= prev.timestamp => prev.timestamp + ChronoDuration::microseconds(1),
            _ => now,
        }
    }

    /// Runs one command through the backend. The returned event is also
    /// appended to the event log.
    pub fn handle_command(
        &mut self,
        command: &str,
        kind: PromptKind,
        backend: &dyn GenerationBackend,
    ) -> Result<CommandEvent, RuntimeError> {
        let command = command.trim();
        if command.is_empty() {
            return Err(RuntimeError::EmptyCommand);
        }
        self.read_sensors();
        let before = self.current.clone();
        let prompt = match kind {
            PromptKind::Action => {
                render_action_prompt(command, &self.model.ordered_sensors(&before))
            }
            PromptKind::Explanation => render_explanation_prompt(&self.model, command, &before),
        };

        let started = Instant::now();
        let mut raw_output = String::new();
        let mut explanation = None;
        let (outcome, error, next) = match backend.generate(&prompt.text) {
            Err(e) => (
                Outcome::RejectedParse,
                Some(EventError::new("backend", "backend-error", e.to_string())),
                None,
            ),
            Ok(raw) => {
                let parsed = parse_completion(&raw, kind);
                raw_output = raw;
                match parsed.parsed {
                    Parsed::Failure(f) => (
                        Outcome::RejectedParse,
                        Some(EventError::new("parse", f.code(), f.to_string())),
                        None,
                    ),
                    Parsed::Explanation(text) if text.trim().is_empty() => (
                        Outcome::RejectedParse,
                        Some(EventError::new("parse", "empty-span", "explanation is empty")),
                        None,
                    ),
                    Parsed::Explanation(text) => {
                        explanation = Some(text.trim().to_string());
                        (Outcome::Explained, None, None)
                    }
                    Parsed::Action(action) => {
                        match validate_action(&self.model, &before.state, &action) {
                            Err(v) => (
                                Outcome::RejectedInvalid,
                                Some(EventError::new("validate", v.code(), v.to_string())),
                                None,
                            ),
                            Ok(()) => match apply_action(
                                &self.model,
                                &before,
                                &action,
                                self.sensors.as_mut(),
                            ) {
                                Ok(next) => (Outcome::Applied, None, Some(next)),
                                Err(ApplyError::Invalid(v)) => (
                                    Outcome::RejectedInvalid,
                                    Some(EventError::new("validate", v.code(), v.to_string())),
                                    None,
                                ),
                                Err(ApplyError::Sensor(e)) => (
                                    Outcome::RejectedInvalid,
                                    Some(EventError::new("apply", "sensor-error", e.to_string())),
                                    None,
                                ),
                            },
                        }
                    }
                }
            }
        };
        let latency_ms = started.elapsed().as_millis() as u64;

        if let Some(next) = next {
            self.current = next;
            self.actuator.actuate(&self.current);
        }
        let event = CommandEvent {
            seq: self.events.len() as u64 + 1,
            timestamp: self.next_timestamp(),
            command: command.to_string(),
            kind,
            raw_output,
            outcome,
            explanation,
            error,
            latency_ms,
            before,
            after: self.current.clone(),
        };
        if outcome.is_rejected() {
            log::warn!(
                "rejected {kind} command {:?}: {}",
                event.command,
                event.error.as_ref().map_or("", |e| e.detail.as_str())
            );
            if let Some(path) = &self.error_log {
                if let Err(e) = jsonl::append(path, &event) {
                    log::error!("could not write error log {}: {e}", path.display());
                }
            }
        }
        self.events.push(event.clone());
        Ok(event)
    }
}
