//! Prompt formats, output extraction, and the language-model backend seam.
//!
//! Prompts are built from delimited blocks, one per line:
//!
//! ```text
//! [COMMAND]it's too hot in here[/COMMAND]
//! [SENSORS]{"room_temperature":81}[/SENSORS]
//! [SETTINGS]
//! ```
//!
//! An action prompt ends at the open settings block; the model completes it
//! with a JSON object and `[/SETTINGS]`. An explanation prompt carries the
//! full snapshot (settings block includes `state`) and ends at an open
//! explanation block. The sensor block is omitted when there are no sensors.

pub mod backend;
pub mod embed;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::state_model::{Action, DeviceModel, Snapshot, STATE_KEY};

pub use backend::{
    BackendConfig, BackendError, FixtureEntry, FnBackend, GenerationBackend, RemoteBackend,
    RemoteConfig, ScriptedBackend,
};
pub use embed::HashingEmbedder;

pub const COMMAND_OPEN: &str = "[COMMAND]";
pub const COMMAND_CLOSE: &str = "[/COMMAND]";
pub const SENSORS_OPEN: &str = "[SENSORS]";
pub const SENSORS_CLOSE: &str = "[/SENSORS]";
pub const SETTINGS_OPEN: &str = "[SETTINGS]";
pub const SETTINGS_CLOSE: &str = "[/SETTINGS]";
pub const EXPLANATION_OPEN: &str = "[EXPLANATION]";
pub const EXPLANATION_CLOSE: &str = "[/EXPLANATION]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Action,
    Explanation,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Action => "action",
            PromptKind::Explanation => "explanation",
        }
    }

    fn delimiters(self) -> (&'static str, &'static str) {
        match self {
            PromptKind::Action => (SETTINGS_OPEN, SETTINGS_CLOSE),
            PromptKind::Explanation => (EXPLANATION_OPEN, EXPLANATION_CLOSE),
        }
    }
}

impl std::fmt::Display for PromptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "action" => Ok(PromptKind::Action),
            "explanation" => Ok(PromptKind::Explanation),
            other => Err(format!("unknown command kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub kind: PromptKind,
}

fn fields_json(state: Option<&str>, fields: &[(String, i64)]) -> String {
    let mut map = Map::new();
    if let Some(state) = state {
        map.insert(STATE_KEY.to_string(), Value::from(state));
    }
    for (k, v) in fields {
        map.insert(k.clone(), Value::from(*v));
    }
    Value::Object(map).to_string()
}

fn push_block(out: &mut String, open: &str, body: &str, close: &str) {
    out.push_str(open);
    out.push_str(body);
    out.push_str(close);
    out.push('\n');
}

/// Renders the action prompt. `sensors` are in template declaration order.
pub fn render_action_prompt(command: &str, sensors: &[(String, i64)]) -> RenderedPrompt {
    let mut text = String::new();
    push_block(&mut text, COMMAND_OPEN, command, COMMAND_CLOSE);
    if !sensors.is_empty() {
        push_block(&mut text, SENSORS_OPEN, &fields_json(None, sensors), SENSORS_CLOSE);
    }
    text.push_str(SETTINGS_OPEN);
    RenderedPrompt {
        text,
        kind: PromptKind::Action,
    }
}

/// Renders the explanation prompt for a full snapshot.
pub fn render_explanation_prompt(
    model: &DeviceModel,
    command: &str,
    snapshot: &Snapshot,
) -> RenderedPrompt {
    let sensors = model.ordered_sensors(snapshot);
    let settings = model.ordered_settings(snapshot);
    let mut text = String::new();
    push_block(&mut text, COMMAND_OPEN, command, COMMAND_CLOSE);
    if !sensors.is_empty() {
        push_block(&mut text, SENSORS_OPEN, &fields_json(None, &sensors), SENSORS_CLOSE);
    }
    push_block(
        &mut text,
        SETTINGS_OPEN,
        &fields_json(Some(&snapshot.state), &settings),
        SETTINGS_CLOSE,
    );
    text.push_str(EXPLANATION_OPEN);
    RenderedPrompt {
        text,
        kind: PromptKind::Explanation,
    }
}

/// Serializes an action as a JSON object: `state` first, then settings in
/// the target template's declaration order, then any undeclared keys.
pub fn action_json(model: &DeviceModel, action: &Action) -> String {
    let mut ordered: Vec<(String, i64)> = Vec::with_capacity(action.settings.len());
    if let Some(t) = model.template(&action.state) {
        for name in t.settings.keys() {
            if let Some(v) = action.settings.get(name) {
                ordered.push((name.clone(), *v));
            }
        }
    }
    for (k, v) in &action.settings {
        if !ordered.iter().any(|(name, _)| name == k) {
            ordered.push((k.clone(), *v));
        }
    }
    fields_json(Some(&action.state), &ordered)
}

/// Target completion for an action prompt.
pub fn action_completion(model: &DeviceModel, action: &Action) -> String {
    format!("{}{SETTINGS_CLOSE}", action_json(model, action))
}

/// Target completion for an explanation prompt.
pub fn explanation_completion(explanation: &str) -> String {
    format!("{}{EXPLANATION_CLOSE}", explanation.trim())
}

/// Wraps a settings payload in its delimiters.
pub fn wrap_settings(payload: &str) -> String {
    format!("{SETTINGS_OPEN}{payload}{SETTINGS_CLOSE}")
}

pub fn wrap_explanation(text: &str) -> String {
    format!("{EXPLANATION_OPEN}{text}{EXPLANATION_CLOSE}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum ParseFailure {
    #[error("opening delimiter not found")]
    MissingOpen,
    #[error("closing delimiter not found")]
    MissingClose,
    #[error("settings payload is not a valid action: {detail}")]
    BadJson { detail: String },
    #[error("delimited span is empty")]
    EmptySpan,
}

impl ParseFailure {
    pub fn code(&self) -> &'static str {
        match self {
            ParseFailure::MissingOpen => "missing-open",
            ParseFailure::MissingClose => "missing-close",
            ParseFailure::BadJson { .. } => "bad-json",
            ParseFailure::EmptySpan => "empty-span",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum Parsed {
    Action(Action),
    Explanation(String),
    Failure(ParseFailure),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub raw: String,
    pub parsed: Parsed,
}

impl ModelOutput {
    pub fn action(&self) -> Option<&Action> {
        match &self.parsed {
            Parsed::Action(a) => Some(a),
            _ => None,
        }
    }

    pub fn explanation(&self) -> Option<&str> {
        match &self.parsed {
            Parsed::Explanation(e) => Some(e),
            _ => None,
        }
    }

    pub fn failure(&self) -> Option<&ParseFailure> {
        match &self.parsed {
            Parsed::Failure(f) => Some(f),
            _ => None,
        }
    }
}

/// First `open ... close` span, trimmed. A second `open` before the close
/// counts as unbalanced.
fn extract_span<'a>(raw: &'a str, open: &str, close: &str) -> Result<&'a str, ParseFailure> {
    let start = raw.find(open).ok_or(ParseFailure::MissingOpen)? + open.len();
    let rest = &raw[start..];
    let end = rest.find(close).ok_or(ParseFailure::MissingClose)?;
    let span = &rest[..end];
    if span.contains(open) {
        return Err(ParseFailure::MissingClose);
    }
    let span = span.trim();
    if span.is_empty() {
        return Err(ParseFailure::EmptySpan);
    }
    Ok(span)
}

fn bad_json(detail: impl Into<String>) -> ParseFailure {
    ParseFailure::BadJson {
        detail: detail.into(),
    }
}

/// Parses a settings payload into an [`Action`]. Values must be integers.
pub fn parse_action_payload(payload: &str) -> Result<Action, ParseFailure> {
    let value: Value = serde_json::from_str(payload).map_err(|e| bad_json(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(bad_json("payload is not a JSON object"));
    };
    let mut action = Action::new(String::new());
    let mut state = None;
    for (key, v) in map {
        if key == STATE_KEY {
            match v {
                Value::String(s) => state = Some(s),
                _ => return Err(bad_json("`state` must be a string")),
            }
        } else {
            let n = v
                .as_i64()
                .ok_or_else(|| bad_json(format!("`{key}` must be an integer")))?;
            action.settings.insert(key, n);
        }
    }
    action.state = state.ok_or_else(|| bad_json("missing `state`"))?;
    Ok(action)
}

/// Extracts the first delimited span of the kind's block from `raw`.
pub fn parse_output(raw: &str, kind: PromptKind) -> ModelOutput {
    let (open, close) = kind.delimiters();
    let parsed = match extract_span(raw, open, close) {
        Err(f) => Parsed::Failure(f),
        Ok(span) => match kind {
            PromptKind::Action => match parse_action_payload(span) {
                Ok(a) => Parsed::Action(a),
                Err(f) => Parsed::Failure(f),
            },
            PromptKind::Explanation => Parsed::Explanation(span.to_string()),
        },
    };
    ModelOutput {
        raw: raw.to_string(),
        parsed,
    }
}

/// Parses a prompt continuation. Prompts end at an open block, so a model
/// that does not echo the prompt emits only the payload and the closing
/// delimiter; the opening delimiter is restored in that case.
pub fn parse_completion(raw: &str, kind: PromptKind) -> ModelOutput {
    let (open, _) = kind.delimiters();
    if raw.contains(open) {
        return parse_output(raw, kind);
    }
    let mut out = parse_output(&format!("{open}{raw}"), kind);
    out.raw = raw.to_string();
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimilarityError {
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// One fine-tuning instance: a rendered prompt plus its target completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub kind: PromptKind,
    pub command: String,
    pub snapshot: Snapshot,
    pub completion: String,
    pub rendered_prompt: String,
}

impl TrainingInstance {
    /// Action instance; the prompt shows the sensors of `context`.
    pub fn action(model: &DeviceModel, command: &str, context: &Snapshot, action: &Action) -> Self {
        let prompt = render_action_prompt(command, &model.ordered_sensors(context));
        Self {
            kind: PromptKind::Action,
            command: command.to_string(),
            snapshot: context.clone(),
            completion: action_completion(model, action),
            rendered_prompt: prompt.text,
        }
    }

    pub fn explanation(
        model: &DeviceModel,
        command: &str,
        snapshot: &Snapshot,
        explanation: &str,
    ) -> Self {
        let prompt = render_explanation_prompt(model, command, snapshot);
        Self {
            kind: PromptKind::Explanation,
            command: command.to_string(),
            snapshot: snapshot.clone(),
            completion: explanation_completion(explanation),
            rendered_prompt: prompt.text,
        }
    }

    /// Full training text: prompt followed by completion.
    pub fn text(&self) -> String {
        format!("{}{}", self.rendered_prompt, self.completion)
    }

    /// Parses the completion back into a model output.
    pub fn target(&self) -> ModelOutput {
        parse_completion(&self.completion, self.kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_prompt_with_sensors() {
        let p = render_action_prompt(
            "it's too hot in here",
            &[("room_temperature".to_string(), 81)],
        );
        assert_eq!(
            p.text,
            "[COMMAND]it's too hot in here[/COMMAND]\n\
             [SENSORS]{\"room_temperature\":81}[/SENSORS]\n\
             [SETTINGS]"
        );
        assert!(p.text.ends_with(SETTINGS_OPEN));
        assert_eq!(p.kind, PromptKind::Action);
    }

    #[test]
    fn sensorless_action_prompt_has_no_sensor_block() {
        let p = render_action_prompt("turn off", &[]);
        assert!(!p.text.contains(SENSORS_OPEN));
        assert_eq!(p, render_action_prompt("turn off", &[]));
    }

    #[test]
    fn explanation_prompt_embeds_snapshot_in_template_order() {
        let lamp = DeviceModel::lamp();
        let snap = Snapshot::new("on")
            .with("r", 235)
            .with("b", 52)
            .with("g", 64)
            .with("brightness", 100);
        let p = render_explanation_prompt(&lamp, "Is that as bright as it gets?", &snap);
        assert_eq!(
            p.text,
            "[COMMAND]Is that as bright as it gets?[/COMMAND]\n\
             [SETTINGS]{\"state\":\"on\",\"brightness\":100,\"r\":235,\"g\":64,\"b\":52}[/SETTINGS]\n\
             [EXPLANATION]"
        );
    }

    #[test]
    fn explanation_prompt_for_off_lamp_has_no_setting_values() {
        let lamp = DeviceModel::lamp();
        let p = render_explanation_prompt(&lamp, "Why's it so dark in here?", &Snapshot::new("off"));
        assert!(p.text.contains("[SETTINGS]{\"state\":\"off\"}[/SETTINGS]"));
    }

    #[test]
    fn parse_examples() {
        let out = parse_output(r#"[SETTINGS]{"state":"off"}[/SETTINGS]"#, PromptKind::Action);
        assert_eq!(out.parsed, Parsed::Action(Action::new("off")));

        let out = parse_output(
            "[EXPLANATION]Yes, the lamp is at 100% brightness.[/EXPLANATION]",
            PromptKind::Explanation,
        );
        assert_eq!(
            out.explanation(),
            Some("Yes, the lamp is at 100% brightness.")
        );

        let out = parse_output(r#"[SETTINGS]{"state":"on",[/SETTINGS]"#, PromptKind::Action);
        assert_eq!(out.failure().map(ParseFailure::code), Some("bad-json"));
    }

    #[test]
    fn parse_failure_reasons() {
        let code = |raw: &str, kind| parse_output(raw, kind).failure().map(|f| f.code());
        assert_eq!(code("no tags", PromptKind::Action), Some("missing-open"));
        assert_eq!(code("[SETTINGS]{}", PromptKind::Action), Some("missing-close"));
        assert_eq!(
            code("[SETTINGS][SETTINGS]{}[/SETTINGS]", PromptKind::Action),
            Some("missing-close")
        );
        assert_eq!(code("[SETTINGS]  [/SETTINGS]", PromptKind::Action), Some("empty-span"));
        assert_eq!(
            code("[EXPLANATION]\n[/EXPLANATION]", PromptKind::Explanation),
            Some("empty-span")
        );
        assert_eq!(code("[SETTINGS][1][/SETTINGS]", PromptKind::Action), Some("bad-json"));
        assert_eq!(
            code(r#"[SETTINGS]{"brightness":3}[/SETTINGS]"#, PromptKind::Action),
            Some("bad-json")
        );
        assert_eq!(
            code(r#"[SETTINGS]{"state":"on","brightness":3.5}[/SETTINGS]"#, PromptKind::Action),
            Some("bad-json")
        );
        assert_eq!(
            code(r#"[SETTINGS]{"state":1}[/SETTINGS]"#, PromptKind::Action),
            Some("bad-json")
        );
    }

    #[test]
    fn trailing_prose_is_ignored() {
        let out = parse_output(
            "[SETTINGS]{\"state\":\"on\",\"brightness\":5}[/SETTINGS] and then [SETTINGS]junk",
            PromptKind::Action,
        );
        assert_eq!(out.action(), Some(&Action::new("on").with("brightness", 5)));
    }

    #[test]
    fn completion_without_open_delimiter() {
        let out = parse_completion("{\"state\":\"off\"}[/SETTINGS]\n", PromptKind::Action);
        assert_eq!(out.action(), Some(&Action::new("off")));
        assert_eq!(out.raw, "{\"state\":\"off\"}[/SETTINGS]\n");
        let out = parse_completion("It is off.[/EXPLANATION]", PromptKind::Explanation);
        assert_eq!(out.explanation(), Some("It is off."));
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -2.0, 7.5];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let c = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((c - 0.974_631_846_197_076_2).abs() < 1e-12);
        assert!((c - 0.9746).abs() < 1e-4);
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(SimilarityError::ZeroVector)
        );
        assert_eq!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(SimilarityError::DimensionMismatch(1, 2))
        );
    }

    #[test]
    fn training_instance_text_and_target() {
        let t = DeviceModel::thermostat();
        let ctx = Snapshot::new("off").with("room_temperature", 81);
        let action = Action::new("cool").with("setpoint", 75);
        let inst = TrainingInstance::action(&t, "it's too hot in here", &ctx, &action);
        assert_eq!(
            inst.text(),
            "[COMMAND]it's too hot in here[/COMMAND]\n\
             [SENSORS]{\"room_temperature\":81}[/SENSORS]\n\
             [SETTINGS]{\"state\":\"cool\",\"setpoint\":75}[/SETTINGS]"
        );
        assert_eq!(inst.target().action(), Some(&action));
    }

    #[test]
    fn prompt_kind_round_trips_as_text() {
        for k in [PromptKind::Action, PromptKind::Explanation] {
            assert_eq!(k.as_str().parse::<PromptKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("question".parse::<PromptKind>().is_err());
    }
}
