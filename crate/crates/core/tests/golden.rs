//! Rendered prompts compared byte for byte against `tests/golden/`.
//! Set `UPDATE_GOLDEN=1` to rewrite the files after an intended change.

use std::path::PathBuf;

use thoughtful_core::prompts;
use thoughtful_core::state_model::{Action, DeviceModel, Snapshot};
use thoughtful_core::wire::{render_action_prompt, render_explanation_prompt, PromptKind};

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_GOLDEN=1", path.display()));
    assert_eq!(actual, expected, "{name} drifted from its golden copy");
}

fn red_light() -> Snapshot {
    Snapshot::new("on")
        .with("brightness", 100)
        .with("r", 235)
        .with("g", 64)
        .with("b", 52)
}

fn warm_room() -> Snapshot {
    Snapshot::new("cool")
        .with("room_temperature", 81)
        .with("setpoint", 75)
}

#[test]
fn device_prompts() {
    let therm = DeviceModel::thermostat();
    check(
        "action_thermostat.txt",
        &render_action_prompt("it's too hot in here", &therm.ordered_sensors(&warm_room())).text,
    );
    check(
        "explanation_thermostat.txt",
        &render_explanation_prompt(&therm, "why is it so loud?", &warm_room()).text,
    );
    check(
        "action_lamp.txt",
        &render_action_prompt("Let there be bright red light!", &[]).text,
    );
}

#[test]
fn teacher_prompts() {
    let lamp = DeviceModel::lamp();
    let therm = DeviceModel::thermostat();
    check(
        "action_synthesis_lamp.txt",
        &prompts::action_synthesis(&lamp, &red_light(), &red_light().to_action(&lamp), &["make it red".into()]),
    );
    check(
        "action_synthesis_thermostat.txt",
        &prompts::action_synthesis(&therm, &warm_room(), &Action::new("cool").with("setpoint", 75), &[]),
    );
    check("explanation_synthesis_lamp.txt", &prompts::explanation_synthesis(&lamp, &red_light()));
    check("query_thermostat_action.txt", &prompts::query(&therm, PromptKind::Action));
    check("query_lamp_explanation.txt", &prompts::query(&lamp, PromptKind::Explanation));
    let off = Snapshot::new("off");
    let response = "{\"state\":\"on\",\"brightness\":20}";
    check("judge_lamp.txt", &prompts::judge(&lamp, PromptKind::Action, "night light please", &off, response));
    check(
        "correction_lamp.txt",
        &prompts::correction(&lamp, PromptKind::Action, "night light please", &off, response),
    );
    check(
        "evaluation_thermostat.txt",
        &prompts::evaluation(&therm, PromptKind::Explanation, "why is it cold?", &warm_room(), "The fan is running."),
    );
}
