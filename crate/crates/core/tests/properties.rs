use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use proptest::prelude::*;
use rand::Rng;

use thoughtful_core::distillation::{
    run_distillation, DistillationConfig, SeenCommands, SlidingWindow, Termination, TrainerError,
    PENDING_FILE,
};
use thoughtful_core::jsonl;
use thoughtful_core::metrics::{jaccard, rouge_scores};
use thoughtful_core::prompts::{extract_command, extract_qa_pairs, CORRECTION_HEADING, QUERY_HEADING};
use thoughtful_core::runtime::{DeviceInstance, SimulatedSensors};
use thoughtful_core::snapshot_gen::{random_snapshot, seeded_rng};
use thoughtful_core::state_model::{
    apply_action, validate_action, validate_snapshot, Action, ApplyError, DeviceModel, SensorError,
    ValueRange,
};
use thoughtful_core::text::tokenize;
use thoughtful_core::wire::{
    action_json, parse_completion, parse_output, wrap_settings, FnBackend, PromptKind,
    ScriptedBackend, TrainingInstance,
};

fn device() -> impl Strategy<Value = DeviceModel> {
    prop_oneof![Just(DeviceModel::lamp()), Just(DeviceModel::thermostat())]
}

/// Actions over real and made-up names, values in and out of range.
fn any_action() -> impl Strategy<Value = Action> {
    let state = prop::sample::select(vec!["on", "off", "heat", "cool", "fan", "eco"]);
    let key = prop::sample::select(vec![
        "brightness",
        "r",
        "g",
        "b",
        "setpoint",
        "room_temperature",
        "volume",
    ]);
    (state, prop::collection::btree_map(key, -50i64..300, 0..5)).prop_map(|(s, settings)| {
        Action {
            state: s.to_string(),
            settings: settings.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    })
}

/// Valid action for a random target state of `model`.
fn valid_action(model: &DeviceModel, seed: u64) -> Action {
    let mut rng = seeded_rng(seed);
    let states = model.states();
    let state = states[rng.random_range(0..states.len())].clone();
    let mut action = Action::new(state.clone());
    for (name, range) in &model.template(&state).unwrap().settings {
        if rng.random_bool(0.6) {
            action
                .settings
                .insert(name.clone(), rng.random_range(range.min..=range.max));
        }
    }
    action
}

const WORDS: &[&str] = &[
    "the", "lamp", "is", "on", "off", "red", "warm", "too", "hot", "why", "it", "light",
];

fn sentence() -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(WORDS), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn generated_snapshots_validate(model in device(), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        for _ in 0..20 {
            let snap = random_snapshot(&model, &mut rng);
            prop_assert_eq!(validate_snapshot(&model, &snap), Ok(()));
        }
    }

    #[test]
    fn applying_is_closed_over_valid_snapshots(
        model in device(),
        seed in any::<u64>(),
        action in any_action(),
        reading in 50i64..=90,
    ) {
        let current = random_snapshot(&model, &mut seeded_rng(seed));
        let mut sensors = move |_: &str, _: ValueRange| Ok::<_, SensorError>(reading);
        match (validate_action(&model, &current.state, &action), apply_action(&model, &current, &action, &mut sensors)) {
            (Ok(()), Ok(next)) => {
                prop_assert_eq!(validate_snapshot(&model, &next), Ok(()));
                prop_assert_eq!(&next.state, &action.state);
                for (k, v) in &action.settings {
                    prop_assert_eq!(next.values.get(k), Some(v));
                }
            }
            (Err(v), Err(ApplyError::Invalid(w))) => prop_assert_eq!(v, w),
            (verdict, applied) => prop_assert!(false, "validate {:?} but apply {:?}", verdict, applied),
        }
    }

    #[test]
    fn out_of_range_sensor_readings_are_refused(seed in any::<u64>(), reading in prop_oneof![-500i64..50, 91i64..500]) {
        let therm = DeviceModel::thermostat();
        let current = random_snapshot(&therm, &mut seeded_rng(seed));
        let action = valid_action(&therm, seed);
        let mut sensors = move |_: &str, _: ValueRange| Ok::<_, SensorError>(reading);
        let result = apply_action(&therm, &current, &action, &mut sensors);
        if validate_action(&therm, &current.state, &action).is_ok() {
            prop_assert!(matches!(result, Err(ApplyError::Sensor(_))), "{:?}", result);
        }
    }

    #[test]
    fn valid_actions_survive_the_wire(model in device(), seed in any::<u64>(), chatter in "[a-z .!]{0,20}") {
        let action = valid_action(&model, seed);
        let raw = format!("{chatter}{}{chatter}", wrap_settings(&action_json(&model, &action)));
        let parsed = parse_output(&raw, PromptKind::Action);
        prop_assert_eq!(parsed.action(), Some(&action));
    }

    #[test]
    fn parsers_accept_any_text(raw in any::<String>(), framed in "(\\[/?(SETTINGS|EXPLANATION|COMMAND)\\]|[{}\":, a-z0-9-])*") {
        for text in [&raw, &framed] {
            for kind in [PromptKind::Action, PromptKind::Explanation] {
                let out = parse_output(text, kind);
                prop_assert_eq!(&out.raw, text);
                let _ = parse_completion(text, kind);
            }
            let _ = extract_command(text);
            let _ = extract_qa_pairs(text);
        }
    }

    #[test]
    fn rouge_scores_are_bounded(a in sentence(), b in sentence()) {
        let s = rouge_scores(&a.join(" "), &b.join(" "));
        for x in [s.rouge1, s.rouge2, s.rouge_l] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert!(s.rouge_l <= s.rouge1 + 1e-12);
    }

    #[test]
    fn rouge1_dominates_rouge2_without_repeated_tokens(
        a in prop::sample::subsequence(WORDS, 1..WORDS.len()).prop_shuffle(),
        b in prop::sample::subsequence(WORDS, 1..WORDS.len()).prop_shuffle(),
    ) {
        let s = rouge_scores(&a.join(" "), &b.join(" "));
        prop_assert!(s.rouge1 + 1e-12 >= s.rouge2, "{:?}", s);
    }

    #[test]
    fn rouge_l_is_one_exactly_for_identical_tokens(a in sentence(), b in sentence(), same in any::<bool>()) {
        let b = if same { a.clone() } else { b };
        let s = rouge_scores(&a.join(" "), &b.join(" "));
        prop_assert_eq!(s.rouge_l == 1.0, a == b);
    }

    #[test]
    fn rouge_ignores_case_spacing_and_punctuation(a in sentence(), b in sentence()) {
        let plain = a.join(" ");
        let noisy = format!("  {}?!", a.join(",\t ").to_uppercase());
        prop_assert_eq!(tokenize(&plain), tokenize(&noisy));
        prop_assert_eq!(rouge_scores(&plain, &b.join(" ")), rouge_scores(&noisy, &b.join(" ")));
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(
        a in prop::collection::btree_set(0u8..12, 0..8),
        b in prop::collection::btree_set(0u8..12, 0..8),
    ) {
        let j = jaccard(&a, &b);
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert!((0.0..=1.0).contains(&j));
        if !a.is_empty() {
            prop_assert_eq!(jaccard(&a, &a), 1.0);
        }
        prop_assert_eq!(j == 0.0, a.intersection(&b).next().is_none());
    }

    #[test]
    fn window_rate_reflects_only_the_last_outcomes(cap in 1usize..20, outcomes in prop::collection::vec(any::<bool>(), 0..60)) {
        let mut w = SlidingWindow::new(cap);
        for o in &outcomes {
            w.push(*o);
        }
        let tail = &outcomes[outcomes.len().saturating_sub(cap)..];
        prop_assert_eq!(w.len(), tail.len());
        prop_assert_eq!(w.positives(), tail.iter().filter(|x| **x).count());
        prop_assert_eq!(w.full_rate().is_some(), outcomes.len() >= cap);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runtime_keeps_device_valid_under_any_output(
        model in device(),
        outputs in prop::collection::vec(
            prop_oneof![
                any::<String>(),
                any_action().prop_map(|a| format!("{}[/SETTINGS]", serde_json::to_string(&a).unwrap())),
                Just("It is fine.[/EXPLANATION]".to_string()),
            ],
            1..40,
        ),
        kinds in prop::collection::vec(any::<bool>(), 40),
    ) {
        let mut dev = DeviceInstance::new(
            model.clone(),
            Box::new(SimulatedSensors::drifting("room_temperature", 70, 5, 1)),
        ).unwrap();
        let n = outputs.len();
        let backend = ScriptedBackend::from_responses(outputs);
        for (i, explain) in kinds.iter().take(n).enumerate() {
            let kind = if *explain { PromptKind::Explanation } else { PromptKind::Action };
            let event = dev.handle_command(&format!("cmd {i}"), kind, &backend).unwrap();
            prop_assert_eq!(validate_snapshot(&model, dev.current()), Ok(()));
            if event.outcome.is_rejected() {
                prop_assert_eq!(&event.before, &event.after);
            }
        }
    }

    #[test]
    fn constant_teacher_starves_the_loop(limit in 1usize..30) {
        let teacher = FnBackend::new(|prompt| {
            Ok(if prompt.starts_with(QUERY_HEADING) {
                "[COMMAND]dim the lamp[/COMMAND]".into()
            } else {
                "false".into()
            })
        });
        let config = DistillationConfig { starvation_limit: limit, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = |_: &Path| -> Result<Option<String>, TrainerError> { Ok(None) };
        let report = run_distillation(
            &FnBackend::constant("?"),
            &teacher,
            &DeviceModel::lamp(),
            &config,
            &SeenCommands::default(),
            &mut trainer,
            dir.path(),
        ).unwrap();
        // The first query is new; every later one repeats it.
        prop_assert_eq!(report.queries, limit + 1);
        prop_assert_eq!(report.termination, Termination::NoveltyStarvation);
    }

    #[test]
    fn adversarial_teacher_never_emits_invalid_instances(seed in any::<u64>()) {
        let therm = DeviceModel::thermostat();
        let counter = AtomicU64::new(0);
        let teacher = FnBackend::new(move |prompt| {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let mut rng = seeded_rng(seed ^ n);
            Ok(if prompt.starts_with(QUERY_HEADING) {
                format!("[COMMAND]c{n}x c{n}y c{n}z[/COMMAND]")
            } else if prompt.starts_with(CORRECTION_HEADING) {
                let state = ["heat", "cool", "fan", "off", "eco"][rng.random_range(0..5)];
                let key = ["setpoint", "room_temperature", "volume"][rng.random_range(0..3)];
                let value = rng.random_range(40..100);
                match rng.random_range(0..4) {
                    0 => format!("[SETTINGS]{{\"state\":\"{state}\",\"{key}\":{value}}}[/SETTINGS]"),
                    1 => format!("[SETTINGS]{{\"state\":\"{state}\"}}[/SETTINGS]"),
                    2 => "[EXPLANATION]Because it is warm.[/EXPLANATION]".into(),
                    _ => "try turning it off and on".into(),
                }
            } else {
                "false".into()
            })
        });
        let config = DistillationConfig { batch_size: 2, max_queries: Some(60), seed, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = |_: &Path| -> Result<Option<String>, TrainerError> { Ok(None) };
        let report = run_distillation(
            &FnBackend::constant("nonsense"),
            &teacher,
            &therm,
            &config,
            &SeenCommands::default(),
            &mut trainer,
            dir.path(),
        ).unwrap();
        let mut files = report.batch_files.clone();
        let pending = dir.path().join(PENDING_FILE);
        if pending.exists() {
            files.push(pending);
        }
        let mut commands = BTreeSet::new();
        for file in files {
            for inst in jsonl::read::<TrainingInstance>(&file).unwrap() {
                prop_assert_eq!(validate_snapshot(&therm, &inst.snapshot), Ok(()));
                prop_assert!(commands.insert((inst.kind, inst.command.clone())));
                if let Some(action) = inst.target().action() {
                    prop_assert_eq!(validate_action(&therm, &inst.snapshot.state, action), Ok(()));
                } else {
                    prop_assert!(inst.target().explanation().is_some());
                }
            }
        }
    }
}

#[test]
fn repeated_tokens_can_lift_rouge2_above_rouge1() {
    // Clipped unigram matches undercount when both texts repeat a word.
    let s = rouge_scores("red on red the", "on red on it");
    assert!((s.rouge1 - 0.5).abs() < 1e-12);
    assert!((s.rouge2 - 2.0 / 3.0).abs() < 1e-12);
}
