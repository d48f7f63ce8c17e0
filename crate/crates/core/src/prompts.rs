//! Teacher prompts.
//!
//! Every prompt starts with a heading line (the `*_HEADING` constants) so
//! scripted fixtures can route responses with a `match` substring. The
//! device name is substituted into otherwise device-independent wording.

use serde_json::{json, Map, Value};

use crate::state_model::{Action, DeviceModel, Snapshot, Template, STATE_KEY};
use crate::wire::{
    action_json, PromptKind, COMMAND_CLOSE, COMMAND_OPEN, EXPLANATION_CLOSE, EXPLANATION_OPEN,
    SETTINGS_CLOSE, SETTINGS_OPEN,
};

pub const ACTION_SYNTHESIS_HEADING: &str = "# Action command synthesis";
pub const EXPLANATION_SYNTHESIS_HEADING: &str = "# Explanation synthesis";
pub const QUERY_HEADING: &str = "# Command synthesis";
pub const JUDGE_HEADING: &str = "# Response judging";
pub const CORRECTION_HEADING: &str = "# Response correction";
pub const EVALUATION_HEADING: &str = "# Response evaluation";

fn ranges_json(fields: &indexmap::IndexMap<String, crate::state_model::ValueRange>) -> Value {
    Value::Object(
        fields
            .iter()
            .map(|(k, r)| (k.clone(), json!([r.min, r.max])))
            .collect(),
    )
}

/// A template as `{"settings": {name: [min, max]}, "sensors": {...}}`.
pub fn template_json(template: &Template) -> String {
    json!({
        "settings": ranges_json(&template.settings),
        "sensors": ranges_json(&template.sensors),
    })
    .to_string()
}

/// Every state with its template and the states reachable from it.
pub fn state_model_json(model: &DeviceModel) -> String {
    let mut states = Map::new();
    for (name, t) in model.templates() {
        let next: Vec<&str> = model
            .states()
            .iter()
            .filter(|s| model.reachable(name, s).unwrap_or(false))
            .map(String::as_str)
            .collect();
        states.insert(
            name.clone(),
            json!({
                "settings": ranges_json(&t.settings),
                "sensors": ranges_json(&t.sensors),
                "can_transition_to": next,
            }),
        );
    }
    Value::Object(states).to_string()
}

/// Full snapshot as one flat JSON object, `state` first, template order.
pub fn snapshot_json(model: &DeviceModel, snapshot: &Snapshot) -> String {
    let mut map = Map::new();
    map.insert(STATE_KEY.into(), Value::from(snapshot.state.as_str()));
    for (k, v) in model
        .ordered_settings(snapshot)
        .into_iter()
        .chain(model.ordered_sensors(snapshot))
    {
        map.insert(k, Value::from(v));
    }
    Value::Object(map).to_string()
}

fn sensors_json(model: &DeviceModel, snapshot: &Snapshot) -> Option<String> {
    let sensors = model.ordered_sensors(snapshot);
    if sensors.is_empty() {
        return None;
    }
    let map: Map<String, Value> = sensors.into_iter().map(|(k, v)| (k, v.into())).collect();
    Some(Value::Object(map).to_string())
}

pub fn action_synthesis(
    model: &DeviceModel,
    snapshot: &Snapshot,
    action: &Action,
    avoid: &[String],
) -> String {
    let device = model.device_name();
    let mut p = format!("{ACTION_SYNTHESIS_HEADING}\n");
    p.push_str(&format!(
        "Imagine a situation where a user may want the {device} to have these settings:\n{}\n",
        action_json(model, action)
    ));
    if let Some(sensors) = sensors_json(model, snapshot) {
        p.push_str(&format!(
            "The {device} currently reads these sensor values:\n{sensors}\n"
        ));
    }
    p.push_str(&format!(
        "Then create a brief command, in informal language, that the user would give to the \
         {device} in that situation. Describe the situation or goal rather than listing the \
         setting values.\n"
    ));
    if !avoid.is_empty() {
        p.push_str("Suggest a different command from each of these:\n");
        for c in avoid {
            p.push_str(&format!("- {c}\n"));
        }
    }
    p.push_str(&format!(
        "Reply with only the command, written as {COMMAND_OPEN}command{COMMAND_CLOSE}."
    ));
    p
}

pub fn explanation_synthesis(model: &DeviceModel, snapshot: &Snapshot) -> String {
    let device = model.device_name();
    let template = model
        .template(&snapshot.state)
        .map(template_json)
        .unwrap_or_else(|| "{}".into());
    format!(
        "{EXPLANATION_SYNTHESIS_HEADING}\n\
         A {device} is in the state described by this snapshot:\n{}\n\
         Its capabilities in this state are given by this template, which maps each setting and \
         sensor to its valid range [min, max]:\n{template}\n\
         For each field of the snapshot, including \"state\", ask a question that a user might \
         ask the {device} about it, then answer the question as the {device}. Ground each answer \
         in the template's ranges.\n\
         Write one pair per line as {COMMAND_OPEN}question{COMMAND_CLOSE}\
         {EXPLANATION_OPEN}answer{EXPLANATION_CLOSE}.",
        snapshot_json(model, snapshot)
    )
}

pub fn query(model: &DeviceModel, kind: PromptKind) -> String {
    let device = model.device_name();
    let goal = match kind {
        PromptKind::Action => format!(
            "an action-oriented command: something a user would say to get the {device} to \
             change its state or settings"
        ),
        PromptKind::Explanation => format!(
            "an explanation-oriented command: a question a user would ask the {device} about \
             its current state or capabilities"
        ),
    };
    format!(
        "{QUERY_HEADING}\n\
         Kind: {kind}\n\
         This is the state model of a {device}. Each state lists its settings and sensors with \
         valid ranges [min, max] and the states it can transition to:\n{}\n\
         Write a new, {goal}. Stay within the device's actual capabilities, and vary the \
         phrasing, situation and difficulty from commands you may have written before.\n\
         Reply with only the command, written as {COMMAND_OPEN}command{COMMAND_CLOSE}.",
        state_model_json(model)
    )
}

fn response_summary(kind: PromptKind, response: &str) -> String {
    match kind {
        PromptKind::Action => format!("{SETTINGS_OPEN}{response}{SETTINGS_CLOSE}"),
        PromptKind::Explanation => format!("{EXPLANATION_OPEN}{response}{EXPLANATION_CLOSE}"),
    }
}

pub fn judge(
    model: &DeviceModel,
    kind: PromptKind,
    command: &str,
    context: &Snapshot,
    response: &str,
) -> String {
    let device = model.device_name();
    format!(
        "{JUDGE_HEADING}\n\
         Kind: {kind}\n\
         State model of the {device}:\n{}\n\
         The {device} was in this state:\n{}\n\
         A user gave the command: {command}\n\
         The {device} responded with:\n{}\n\
         Does the response satisfy the user's request expressed in the command? Answer with \
         exactly one word, true or false.",
        state_model_json(model),
        snapshot_json(model, context),
        response_summary(kind, response)
    )
}

pub fn correction(
    model: &DeviceModel,
    kind: PromptKind,
    command: &str,
    context: &Snapshot,
    response: &str,
) -> String {
    let device = model.device_name();
    let format = match kind {
        PromptKind::Action => format!(
            "a JSON object with \"state\" and any settings to change, written as \
             {SETTINGS_OPEN}{{...}}{SETTINGS_CLOSE}"
        ),
        PromptKind::Explanation => {
            format!("the explanation written as {EXPLANATION_OPEN}text{EXPLANATION_CLOSE}")
        }
    };
    format!(
        "{CORRECTION_HEADING}\n\
         Kind: {kind}\n\
         State model of the {device}:\n{}\n\
         The {device} was in this state:\n{}\n\
         A user gave the command: {command}\n\
         The {device} responded incorrectly with:\n{}\n\
         Write the response the {device} should have given. Use only states, settings and \
         ranges that exist in the state model; sensors cannot be changed. Reply with only \
         {format}.",
        state_model_json(model),
        snapshot_json(model, context),
        response_summary(kind, response)
    )
}

pub fn evaluation(
    model: &DeviceModel,
    kind: PromptKind,
    command: &str,
    context: &Snapshot,
    response: &str,
) -> String {
    let device = model.device_name();
    format!(
        "{EVALUATION_HEADING}\n\
         Kind: {kind}\n\
         State model of the {device}:\n{}\n\
         The {device} was in this state:\n{}\n\
         A user gave the command: {command}\n\
         The {device} responded with:\n{}\n\
         Label the response \"correct\" if it is appropriate for the command and state, \
         otherwise \"incorrect\". For an incorrect response, list every field of the snapshot \
         (including \"state\") that was incorrectly set or incorrectly explained.\n\
         Reply with only JSON: {{\"correct\": true|false, \"incorrect_fields\": [names]}}",
        state_model_json(model),
        snapshot_json(model, context),
        response_summary(kind, response)
    )
}

/// Text of the first `[COMMAND]...[/COMMAND]` span, or the whole reply when
/// no delimiters are present. Surrounding quotes are stripped.
pub fn extract_command(reply: &str) -> String {
    let inner = reply
        .find(COMMAND_OPEN)
        .map(|i| &reply[i + COMMAND_OPEN.len()..])
        .map(|rest| rest.find(COMMAND_CLOSE).map_or(rest, |j| &rest[..j]))
        .unwrap_or(reply);
    inner
        .trim()
        .trim_matches(|c| c == '"' || c == '\u{201c}' || c == '\u{201d}')
        .trim()
        .to_string()
}

/// All `[COMMAND]q[/COMMAND][EXPLANATION]a[/EXPLANATION]` pairs in order.
pub fn extract_qa_pairs(reply: &str) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    let mut rest = reply;
    while let Some(i) = rest.find(COMMAND_OPEN) {
        rest = &rest[i + COMMAND_OPEN.len()..];
        let Some(j) = rest.find(COMMAND_CLOSE) else {
            break;
        };
        let question = rest[..j].trim().to_string();
        rest = &rest[j + COMMAND_CLOSE.len()..];
        let Some(k) = rest.find(EXPLANATION_OPEN) else {
            break;
        };
        // The answer must belong to this question, not a later one.
        if rest[..k].contains(COMMAND_OPEN) {
            continue;
        }
        let after = &rest[k + EXPLANATION_OPEN.len()..];
        let Some(l) = after.find(EXPLANATION_CLOSE) else {
            break;
        };
        let answer = after[..l].trim().to_string();
        rest = &after[l + EXPLANATION_CLOSE.len()..];
        if !question.is_empty() && !answer.is_empty() {
            pairs.push((question, answer));
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_extraction() {
        assert_eq!(extract_command("[COMMAND]I'm off to bed.[/COMMAND]"), "I'm off to bed.");
        assert_eq!(extract_command("  \"Let there be light!\" "), "Let there be light!");
        assert_eq!(extract_command("sure: [COMMAND] dim it "), "dim it");
        assert_eq!(extract_command("   "), "");
    }

    #[test]
    fn qa_pair_extraction() {
        let reply = "[COMMAND]Why's it so dark in here?[/COMMAND][EXPLANATION]It's dark because the lamp is off.[/EXPLANATION]\n\
                     [COMMAND]orphan[/COMMAND]\n\
                     [COMMAND]Is it on?[/COMMAND] [EXPLANATION] No. [/EXPLANATION]\n\
                     [COMMAND]dangling[/COMMAND][EXPLANATION]never closed";
        assert_eq!(
            extract_qa_pairs(reply),
            vec![
                (
                    "Why's it so dark in here?".to_string(),
                    "It's dark because the lamp is off.".to_string()
                ),
                ("Is it on?".to_string(), "No.".to_string()),
            ]
        );
        assert!(extract_qa_pairs("nothing useful").is_empty());
    }

    #[test]
    fn prompts_carry_device_name_and_heading() {
        let t = DeviceModel::thermostat();
        let snap = Snapshot::new("off").with("room_temperature", 81);
        let a = action_synthesis(&t, &snap, &Action::new("off"), &["too hot".into()]);
        assert!(a.starts_with(ACTION_SYNTHESIS_HEADING));
        assert!(a.contains("thermostat"));
        assert!(a.contains("{\"room_temperature\":81}"));
        assert!(a.contains("- too hot"));

        let e = explanation_synthesis(&DeviceModel::lamp(), &Snapshot::new("off"));
        assert!(e.starts_with(EXPLANATION_SYNTHESIS_HEADING));
        assert!(e.contains("lamp"));

        let q = query(&t, PromptKind::Explanation);
        assert!(q.contains("\"setpoint\":[50,90]"));
        assert!(q.contains("Kind: explanation"));
    }

    #[test]
    fn state_model_json_lists_transitions() {
        let v: Value = serde_json::from_str(&state_model_json(&DeviceModel::lamp())).unwrap();
        assert_eq!(v["on"]["can_transition_to"], json!(["off", "on"]));
        assert_eq!(v["on"]["settings"]["brightness"], json!([0, 100]));
    }

    #[test]
    fn snapshot_json_is_flat_and_ordered() {
        let t = DeviceModel::thermostat();
        let s = Snapshot::new("heat")
            .with("room_temperature", 55)
            .with("setpoint", 68);
        assert_eq!(
            snapshot_json(&t, &s),
            r#"{"state":"heat","setpoint":68,"room_temperature":55}"#
        );
    }
}
