//! Formal device state models.
//!
//! A [`DeviceModel`] pairs a coarse state machine (named states plus permitted
//! transitions) with one [`Template`] per state. Templates declare which
//! mutable settings and immutable sensors are relevant in that state, each
//! with an inclusive integer [`ValueRange`]. At runtime the device is described
//! by a [`Snapshot`]; language models propose [`Action`]s, which carry a target
//! state and setting values but never sensor values.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Key under which the high-level state name appears in rendered snapshots.
pub const STATE_KEY: &str = "state";

const LAMP_JSON: &str = include_str!("../devices/lamp.json");
const THERMOSTAT_JSON: &str = include_str!("../devices/thermostat.json");

/// Closed integer interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ValueRange {
    pub min: i64,
    pub max: i64,
}

impl ValueRange {
    pub fn new(min: i64, max: i64) -> Result<Self, ModelError> {
        if min > max {
            return Err(ModelError::InvalidRange {
                name: String::new(),
                min,
                max,
            });
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, value: i64) -> bool {
        self.min <= value && value <= self.max
    }

    pub fn clamp(&self, value: i64) -> i64 {
        value.clamp(self.min, self.max)
    }
}

impl fmt::Display for ValueRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.min, self.max)
    }
}

/// Settings and sensors relevant to one state, in declaration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Template {
    #[serde(default)]
    pub settings: IndexMap<String, ValueRange>,
    #[serde(default)]
    pub sensors: IndexMap<String, ValueRange>,
}

impl Template {
    pub fn is_empty(&self) -> bool {
        self.settings.is_empty() && self.sensors.is_empty()
    }

    pub fn field_count(&self) -> usize {
        self.settings.len() + self.sensors.len()
    }

    /// Range of a setting or sensor declared in this template.
    pub fn range_of(&self, name: &str) -> Option<ValueRange> {
        self.settings
            .get(name)
            .or_else(|| self.sensors.get(name))
            .copied()
    }

    /// All fields, settings first, each group in declaration order.
    pub fn fields(&self) -> impl Iterator<Item = (&str, ValueRange)> {
        self.settings
            .iter()
            .chain(self.sensors.iter())
            .map(|(k, r)| (k.as_str(), *r))
    }
}

/// Errors raised while loading or querying a device model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("device declares no states")]
    NoStates,
    #[error("state `{0}` declared more than once")]
    DuplicateState(String),
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("transition ({from}, {to}) references an undeclared state")]
    BadTransition { from: String, to: String },
    #[error("state `{0}` has no template")]
    MissingTemplate(String),
    #[error("template `{0}` does not belong to a declared state")]
    UnexpectedTemplate(String),
    #[error("template `{state}` uses the reserved key `state`")]
    ReservedKey { state: String },
    #[error("`{name}` is both a setting and a sensor")]
    SettingSensorOverlap { name: String },
    #[error("invalid range for `{name}`: min {min} > max {max}")]
    InvalidRange { name: String, min: i64, max: i64 },
    #[error("setting `{0}` has no default value")]
    MissingDefault(String),
    #[error("default for `{0}` does not name a setting")]
    UnknownDefault(String),
    #[error("default {value} for `{name}` lies outside {range} in state `{state}`")]
    DefaultOutOfRange {
        name: String,
        value: i64,
        range: ValueRange,
        state: String,
    },
    #[error("group `{group}` names unknown setting `{name}`")]
    UnknownGroupMember { group: String, name: String },
    #[error("invalid device definition: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read device definition: {0}")]
    Io(#[from] std::io::Error),
}

/// On-disk form of a device model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceDefinition {
    pub device_name: String,
    pub states: Vec<String>,
    #[serde(default)]
    pub transitions: Vec<(String, String)>,
    pub templates: IndexMap<String, Template>,
    #[serde(default)]
    pub defaults: IndexMap<String, i64>,
    /// Optional reporting groups, e.g. `color -> [r, g, b]`.
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub groups: IndexMap<String, Vec<String>>,
}

/// A validated device model. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DeviceDefinition", into = "DeviceDefinition")]
pub struct DeviceModel {
    device_name: String,
    states: Vec<String>,
    transitions: BTreeSet<(String, String)>,
    templates: IndexMap<String, Template>,
    defaults: IndexMap<String, i64>,
    groups: IndexMap<String, Vec<String>>,
}

impl TryFrom<DeviceDefinition> for DeviceModel {
    type Error = ModelError;

    fn try_from(def: DeviceDefinition) -> Result<Self, Self::Error> {
        if def.states.is_empty() {
            return Err(ModelError::NoStates);
        }
        let mut seen = BTreeSet::new();
        for s in &def.states {
            if !seen.insert(s.as_str()) {
                return Err(ModelError::DuplicateState(s.clone()));
            }
        }
        let mut transitions = BTreeSet::new();
        for (from, to) in &def.transitions {
            if !seen.contains(from.as_str()) || !seen.contains(to.as_str()) {
                return Err(ModelError::BadTransition {
                    from: from.clone(),
                    to: to.clone(),
                });
            }
            transitions.insert((from.clone(), to.clone()));
        }
        for s in &def.states {
            if !def.templates.contains_key(s) {
                return Err(ModelError::MissingTemplate(s.clone()));
            }
        }
        // Re-key templates in state declaration order.
        let mut templates = IndexMap::new();
        for s in &def.states {
            templates.insert(s.clone(), def.templates[s].clone());
        }
        if let Some(extra) = def.templates.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(ModelError::UnexpectedTemplate(extra.clone()));
        }

        let mut setting_names = BTreeSet::new();
        let mut sensor_names = BTreeSet::new();
        for (state, t) in &templates {
            for (name, range) in t.settings.iter().chain(t.sensors.iter()) {
                if name == STATE_KEY {
                    return Err(ModelError::ReservedKey {
                        state: state.clone(),
                    });
                }
                if range.min > range.max {
                    return Err(ModelError::InvalidRange {
                        name: name.clone(),
                        min: range.min,
                        max: range.max,
                    });
                }
            }
            setting_names.extend(t.settings.keys().map(String::as_str));
            sensor_names.extend(t.sensors.keys().map(String::as_str));
        }
        if let Some(name) = setting_names.intersection(&sensor_names).next() {
            return Err(ModelError::SettingSensorOverlap {
                name: name.to_string(),
            });
        }

        for name in def.defaults.keys() {
            if !setting_names.contains(name.as_str()) {
                return Err(ModelError::UnknownDefault(name.clone()));
            }
        }
        for (state, t) in &templates {
            for (name, range) in &t.settings {
                let value = *def
                    .defaults
                    .get(name)
                    .ok_or_else(|| ModelError::MissingDefault(name.clone()))?;
                if !range.contains(value) {
                    return Err(ModelError::DefaultOutOfRange {
                        name: name.clone(),
                        value,
                        range: *range,
                        state: state.clone(),
                    });
                }
            }
        }
        for (group, members) in &def.groups {
            for m in members {
                if !setting_names.contains(m.as_str()) && !sensor_names.contains(m.as_str()) {
                    return Err(ModelError::UnknownGroupMember {
                        group: group.clone(),
                        name: m.clone(),
                    });
                }
            }
        }

        Ok(Self {
            device_name: def.device_name,
            states: def.states,
            transitions,
            templates,
            defaults: def.defaults,
            groups: def.groups,
        })
    }
}

impl From<DeviceModel> for DeviceDefinition {
    fn from(m: DeviceModel) -> Self {
        Self {
            device_name: m.device_name,
            states: m.states,
            transitions: m.transitions.into_iter().collect(),
            templates: m.templates,
            defaults: m.defaults,
            groups: m.groups,
        }
    }
}

impl DeviceModel {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The bundled lamp: `off`/`on`, brightness plus RGB color, no sensors.
    pub fn lamp() -> Self {
        Self::from_json(LAMP_JSON).expect("bundled lamp definition is valid")
    }

    /// The bundled thermostat: heat/cool/fan/off with a room temperature sensor.
    pub fn thermostat() -> Self {
        Self::from_json(THERMOSTAT_JSON).expect("bundled thermostat definition is valid")
    }

    /// Looks up a bundled device by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "lamp" => Some(Self::lamp()),
            "thermostat" => Some(Self::thermostat()),
            _ => None,
        }
    }

    pub fn device_name(&self) -> &str {
        &self.device_name
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn transitions(&self) -> &BTreeSet<(String, String)> {
        &self.transitions
    }

    pub fn templates(&self) -> &IndexMap<String, Template> {
        &self.templates
    }

    pub fn defaults(&self) -> &IndexMap<String, i64> {
        &self.defaults
    }

    pub fn groups(&self) -> &IndexMap<String, Vec<String>> {
        &self.groups
    }

    pub fn has_state(&self, state: &str) -> bool {
        self.templates.contains_key(state)
    }

    pub fn template(&self, state: &str) -> Option<&Template> {
        self.templates.get(state)
    }

    /// The state a device boots into: `off` when declared, otherwise the first state.
    pub fn initial_state(&self) -> &str {
        if self.has_state("off") {
            "off"
        } else {
            &self.states[0]
        }
    }

    /// Setting names across all templates, in order of first appearance.
    pub fn setting_universe(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in self.templates.values() {
            for k in t.settings.keys() {
                if !out.contains(&k.as_str()) {
                    out.push(k);
                }
            }
        }
        out
    }

    /// Sensor names across all templates, in order of first appearance.
    pub fn sensor_universe(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in self.templates.values() {
            for k in t.sensors.keys() {
                if !out.contains(&k.as_str()) {
                    out.push(k);
                }
            }
        }
        out
    }

    pub fn is_sensor(&self, name: &str) -> bool {
        self.templates.values().any(|t| t.sensors.contains_key(name))
    }

    /// Reporting name for a field: its group when grouped, else itself.
    pub fn field_group<'a>(&'a self, name: &'a str) -> &'a str {
        self.groups
            .iter()
            .find(|(_, members)| members.iter().any(|m| m == name))
            .map(|(g, _)| g.as_str())
            .unwrap_or(name)
    }

    /// One-hop reachability; a state is always reachable from itself.
    pub fn reachable(&self, from: &str, to: &str) -> Result<bool, ModelError> {
        for s in [from, to] {
            if !self.has_state(s) {
                return Err(ModelError::UnknownState(s.to_string()));
            }
        }
        Ok(from == to
            || self
                .transitions
                .contains(&(from.to_string(), to.to_string())))
    }

    /// Setting values of a snapshot in template declaration order.
    pub fn ordered_settings(&self, snap: &Snapshot) -> Vec<(String, i64)> {
        self.ordered_fields(snap, |t| &t.settings)
    }

    /// Sensor values of a snapshot in template declaration order.
    pub fn ordered_sensors(&self, snap: &Snapshot) -> Vec<(String, i64)> {
        self.ordered_fields(snap, |t| &t.sensors)
    }

    fn ordered_fields(
        &self,
        snap: &Snapshot,
        pick: impl Fn(&Template) -> &IndexMap<String, ValueRange>,
    ) -> Vec<(String, i64)> {
        let Some(t) = self.template(&snap.state) else {
            return Vec::new();
        };
        pick(t)
            .keys()
            .filter_map(|k| snap.values.get(k).map(|v| (k.clone(), *v)))
            .collect()
    }
}

/// Runtime instantiation of a template.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Snapshot {
    pub state: String,
    #[serde(default)]
    pub values: BTreeMap<String, i64>,
}

impl Snapshot {
    pub fn new(state: impl Into<String>) -> Self {
        Self {
            state: state.into(),
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, value: i64) -> Self {
        self.values.insert(name.into(), value);
        self
    }

    /// The snapshot as an action: the same state with sensors stripped.
    pub fn to_action(&self, model: &DeviceModel) -> Action {
        Action {
            state: self.state.clone(),
            settings: self
                .values
                .iter()
                .filter(|(k, _)| !model.is_sensor(k))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }
}

/// A proposed assignment of a target state and (some) setting values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub state: String,
    #[serde(flatten)]
    pub settings: BTreeMap<String, i64>,
}

impl Action {
    pub fn new(state: impl Into<String>) -> Self {
        Self {
            state: state.into(),
            settings: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, value: i64) -> Self {
        self.settings.insert(name.into(), value);
        self
    }
}

/// Why a snapshot or action failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(tag = "code", rename_all = "kebab-case")]
pub enum Violation {
    #[error("unknown state `{state}`")]
    UnknownState { state: String },
    #[error("missing value for `{key}`")]
    MissingKey { key: String },
    #[error("`{key}` is not part of the template")]
    ExtraKey { key: String },
    #[error("{value} is outside {range} for `{key}`")]
    OutOfRange {
        key: String,
        value: i64,
        range: ValueRange,
    },
    #[error("actions may not assign sensor `{key}`")]
    SensorMutation { key: String },
    #[error("`{to}` is not reachable from `{from}`")]
    Unreachable { from: String, to: String },
}

impl Violation {
    /// Stable machine-readable reason code.
    pub fn code(&self) -> &'static str {
        match self {
            Violation::UnknownState { .. } => "unknown-state",
            Violation::MissingKey { .. } => "missing-key",
            Violation::ExtraKey { .. } => "extra-key",
            Violation::OutOfRange { .. } => "out-of-range",
            Violation::SensorMutation { .. } => "sensor-mutation",
            Violation::Unreachable { .. } => "unreachable",
        }
    }
}

/// `Ok(())` when valid; otherwise the first violation found.
pub type Verdict = Result<(), Violation>;

pub fn validate_snapshot(model: &DeviceModel, snap: &Snapshot) -> Verdict {
    let template = model
        .template(&snap.state)
        .ok_or_else(|| Violation::UnknownState {
            state: snap.state.clone(),
        })?;
    for (name, range) in template.fields() {
        let value = *snap.values.get(name).ok_or_else(|| Violation::MissingKey {
            key: name.to_string(),
        })?;
        if !range.contains(value) {
            return Err(Violation::OutOfRange {
                key: name.to_string(),
                value,
                range,
            });
        }
    }
    if let Some(extra) = snap
        .values
        .keys()
        .find(|k| template.range_of(k).is_none())
    {
        return Err(Violation::ExtraKey { key: extra.clone() });
    }
    Ok(())
}

/// Checks an action against the state model from `current_state`.
///
/// Sensor keys are rejected before anything else, then reachability of the
/// target state, then membership and range of each named setting in the
/// target template. Actions may name a subset of the target's settings.
pub fn validate_action(model: &DeviceModel, current_state: &str, action: &Action) -> Verdict {
    if !model.has_state(current_state) {
        return Err(Violation::UnknownState {
            state: current_state.to_string(),
        });
    }
    let target = model
        .template(&action.state)
        .ok_or_else(|| Violation::UnknownState {
            state: action.state.clone(),
        })?;
    if let Some(key) = action.settings.keys().find(|k| model.is_sensor(k)) {
        return Err(Violation::SensorMutation { key: key.clone() });
    }
    // Both states are known here, so reachability cannot fail.
    if !model.reachable(current_state, &action.state).unwrap_or(false) {
        return Err(Violation::Unreachable {
            from: current_state.to_string(),
            to: action.state.clone(),
        });
    }
    for (key, &value) in &action.settings {
        let range = target
            .settings
            .get(key)
            .ok_or_else(|| Violation::ExtraKey { key: key.clone() })?;
        if !range.contains(value) {
            return Err(Violation::OutOfRange {
                key: key.clone(),
                value,
                range: *range,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("sensor `{name}`: {reason}")]
pub struct SensorError {
    pub name: String,
    pub reason: String,
}

/// Source of live sensor readings.
pub trait SensorSource: Send {
    fn read(&mut self, name: &str, range: ValueRange) -> Result<i64, SensorError>;
}

impl<F> SensorSource for F
where
    F: FnMut(&str, ValueRange) -> Result<i64, SensorError> + Send,
{
    fn read(&mut self, name: &str, range: ValueRange) -> Result<i64, SensorError> {
        self(name, range)
    }
}

#[derive(Debug, Error)]
pub enum ApplyError {
    #[error("action rejected: {0}")]
    Invalid(#[from] Violation),
    #[error(transparent)]
    Sensor(#[from] SensorError),
}

/// Produces the snapshot that results from applying `action` to `current`.
///
/// Settings the action names take its values. Unnamed settings of the
/// target template carry over from `current` when it holds an in-range value
/// for them, otherwise they take the device default. Sensors are re-read.
pub fn apply_action(
    model: &DeviceModel,
    current: &Snapshot,
    action: &Action,
    sensors: &mut dyn SensorSource,
) -> Result<Snapshot, ApplyError> {
    validate_action(model, &current.state, action)?;
    let target = model
        .template(&action.state)
        .expect("validated action names a known state");
    let mut values = BTreeMap::new();
    for (name, range) in &target.settings {
        let value = action
            .settings
            .get(name)
            .copied()
            .or_else(|| {
                current
                    .values
                    .get(name)
                    .copied()
                    .filter(|v| range.contains(*v))
            })
            .unwrap_or(model.defaults[name]);
        values.insert(name.clone(), value);
    }
    for (name, range) in &target.sensors {
        let value = read_sensor(sensors, name, *range)?;
        values.insert(name.clone(), value);
    }
    Ok(Snapshot {
        state: action.state.clone(),
        values,
    })
}

/// Reads one sensor, rejecting values outside the declared range.
pub fn read_sensor(
    sensors: &mut dyn SensorSource,
    name: &str,
    range: ValueRange,
) -> Result<i64, SensorError> {
    let value = sensors.read(name, range)?;
    if !range.contains(value) {
        return Err(SensorError {
            name: name.to_string(),
            reason: format!("reading {value} outside {range}"),
        });
    }
    Ok(value)
}
