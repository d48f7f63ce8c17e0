//! Teacher/student distillation loop.
//!
//! Each iteration the teacher writes a new command, the student answers it,
//! and the teacher judges the answer. Wrong answers get a teacher correction,
//! which is kept only if it fits the device's state model. Once enough
//! corrections of both kinds are pending, they are written to a batch file
//! and handed to an external trainer, and the student is re-pointed at the
//! checkpoint it reports.

use std::collections::{BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl;
use crate::novelty::CommandHistory;
use crate::prompts;
use crate::snapshot_gen::{random_snapshot, random_snapshot_in, seeded_rng};
use crate::state_model::{validate_action, DeviceModel, Snapshot};
use crate::wire::{
    action_json, parse_completion, render_action_prompt, render_explanation_prompt, BackendError,
    GenerationBackend, ModelOutput, Parsed, PromptKind, TrainingInstance,
};

pub const REPORT_FILE: &str = "report.json";
pub const PENDING_FILE: &str = "pending.jsonl";

#[derive(Debug, Error)]
pub enum DistillationError {
    #[error("invalid distillation configuration: {0}")]
    Config(String),
    #[error("teacher returned an empty command {0} times")]
    EmptyQuery(usize),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("trainer failed on {batch}: {source}")]
    Trainer {
        batch: PathBuf,
        #[source]
        source: TrainerError,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("could not run trainer: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("trainer exited with {status}: {stderr}")]
    Failed { status: String, stderr: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillationConfig {
    /// Action commands at or above this similarity to a seen command are discarded.
    pub novelty_threshold: f64,
    /// Stop once the windowed correct rate exceeds this.
    pub correct_rate_stop: f64,
    /// Stop once the windowed correction non-adherence rate exceeds this.
    pub nonadherence_stop: f64,
    /// Corrections per fine-tuning batch, half of each kind.
    pub batch_size: usize,
    pub rate_window: usize,
    /// Stop after this many consecutive rejected queries.
    pub starvation_limit: usize,
    pub max_queries: Option<usize>,
    /// Attempts per backend call on retryable errors.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            novelty_threshold: 0.85,
            correct_rate_stop: 0.80,
            nonadherence_stop: 0.90,
            batch_size: 64,
            rate_window: 50,
            starvation_limit: 25,
            max_queries: None,
            max_retries: 3,
            seed: 0,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<(), DistillationError> {
        let bad = |m: &str| Err(DistillationError::Config(m.to_string()));
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !unit(self.novelty_threshold) {
            return bad("novelty_threshold must lie in (0, 1]");
        }
        if !unit(self.correct_rate_stop) || !unit(self.nonadherence_stop) {
            return bad("stop thresholds must lie in (0, 1]");
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return bad("batch_size must be a positive even number");
        }
        if self.rate_window == 0 || self.starvation_limit == 0 || self.max_retries == 0 {
            return bad("rate_window, starvation_limit and max_retries must be positive");
        }
        Ok(())
    }
}

/// Outcome rate over the most recent `capacity` observations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlidingWindow {
    capacity: usize,
    outcomes: VecDeque<bool>,
}

impl SlidingWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            outcomes: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, outcome: bool) {
        if self.outcomes.len() == self.capacity {
            self.outcomes.pop_front();
        }
        self.outcomes.push_back(outcome);
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.outcomes.len() == self.capacity
    }

    pub fn positives(&self) -> usize {
        self.outcomes.iter().filter(|x| **x).count()
    }

    /// Fraction of positive outcomes, or `None` while no outcome is recorded.
    pub fn rate(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.positives() as f64 / self.len() as f64)
    }

    /// Rate once the window is full; stop rules only act on this.
    pub fn full_rate(&self) -> Option<f64> {
        if self.is_full() {
            self.rate()
        } else {
            None
        }
    }

    pub fn clear(&mut self) {
        self.outcomes.clear();
    }
}

fn retrying<T>(
    attempts: usize,
    mut f: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut last = None;
    for _ in 0..attempts.max(1) {
        match f() {
            Err(e) if e.is_retryable() => {
                log::warn!("retrying backend call: {e}");
                last = Some(e);
            }
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Asks the teacher for a new command of `kind`. Empty replies are retried.
pub fn synthesize_query(
    teacher: &dyn GenerationBackend,
    model: &DeviceModel,
    kind: PromptKind,
    attempts: usize,
) -> Result<String, DistillationError> {
    let prompt = prompts::query(model, kind);
    for _ in 0..attempts.max(1) {
        let reply = retrying(attempts, || teacher.generate(&prompt))?;
        let command = prompts::extract_command(&reply);
        if !command.is_empty() {
            return Ok(command);
        }
        log::warn!("teacher returned an empty {kind} command");
    }
    Err(DistillationError::EmptyQuery(attempts.max(1)))
}

/// Explanation commands are always novel; action commands are novel when
/// their similarity to every seen command stays below `threshold`.
pub fn check_novelty(
    kind: PromptKind,
    embedding: &[f64],
    seen: &CommandHistory,
    threshold: f64,
) -> bool {
    match kind {
        PromptKind::Explanation => true,
        PromptKind::Action => seen.max_similarity(embedding) < threshold,
    }
}

/// A student answer together with the situation it was given.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentRun {
    pub command: String,
    pub kind: PromptKind,
    pub context: Snapshot,
    pub output: ModelOutput,
}

/// Runs the student on `command`. Action commands start from a snapshot in
/// the initial state; explanation commands from a random snapshot.
pub fn run_student<R: Rng + ?Sized>(
    student: &dyn GenerationBackend,
    model: &DeviceModel,
    command: &str,
    kind: PromptKind,
    rng: &mut R,
    attempts: usize,
) -> Result<StudentRun, DistillationError> {
    let (context, prompt) = match kind {
        PromptKind::Action => {
            let ctx = random_snapshot_in(model, model.initial_state(), rng)
                .expect("initial state is declared");
            let p = render_action_prompt(command, &model.ordered_sensors(&ctx));
            (ctx, p)
        }
        PromptKind::Explanation => {
            let ctx = random_snapshot(model, rng);
            let p = render_explanation_prompt(model, command, &ctx);
            (ctx, p)
        }
    };
    let raw = retrying(attempts, || student.generate(&prompt.text))?;
    Ok(StudentRun {
        command: command.to_string(),
        kind,
        context,
        output: parse_completion(&raw, kind),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub label: bool,
    pub rationale: String,
}

impl JudgeVerdict {
    fn fail(rationale: impl Into<String>) -> Self {
        Self {
            label: false,
            rationale: rationale.into(),
        }
    }
}

/// Reads a strict true/false verdict from the first word of `reply`.
pub fn parse_verdict(reply: &str) -> JudgeVerdict {
    let first = reply
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_ascii_lowercase();
    match first.as_str() {
        "true" => JudgeVerdict {
            label: true,
            rationale: reply.trim().to_string(),
        },
        "false" => JudgeVerdict::fail(reply.trim()),
        _ => {
            log::warn!("judge-unparseable verdict: {reply:?}");
            JudgeVerdict::fail("judge-unparseable")
        }
    }
}

/// Judges a student answer. Unparseable or state-model-invalid answers are
/// judged false locally without asking the teacher.
pub fn judge(
    teacher: &dyn GenerationBackend,
    model: &DeviceModel,
    run: &StudentRun,
    attempts: usize,
) -> Result<JudgeVerdict, DistillationError> {
    let response = match &run.output.parsed {
        Parsed::Failure(f) => return Ok(JudgeVerdict::fail(format!("parse-failure: {}", f.code()))),
        Parsed::Action(a) => {
            if let Err(v) = validate_action(model, &run.context.state, a) {
                return Ok(JudgeVerdict::fail(format!("invalid-action: {}", v.code())));
            }
            action_json(model, a)
        }
        Parsed::Explanation(text) => text.clone(),
    };
    let prompt = prompts::judge(model, run.kind, &run.command, &run.context, &response);
    let reply = retrying(attempts, || teacher.generate(&prompt))?;
    Ok(parse_verdict(&reply))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Correction {
    Accepted(TrainingInstance),
    /// The teacher's correction does not fit the state model or could not be parsed.
    NonAdherent { reason: String },
}

/// Asks the teacher what the student should have answered and checks it
/// against the state model from the run's context state.
pub fn synthesize_correction(
    teacher: &dyn GenerationBackend,
    model: &DeviceModel,
    run: &StudentRun,
    attempts: usize,
) -> Result<Correction, DistillationError> {
    let response = match &run.output.parsed {
        Parsed::Action(a) => action_json(model, a),
        Parsed::Explanation(t) => t.clone(),
        Parsed::Failure(_) => run.output.raw.clone(),
    };
    let prompt = prompts::correction(model, run.kind, &run.command, &run.context, &response);
    let reply = retrying(attempts, || teacher.generate(&prompt))?;
    let parsed = parse_completion(reply.trim(), run.kind);
    Ok(match parsed.parsed {
        Parsed::Failure(f) => Correction::NonAdherent {
            reason: f.code().to_string(),
        },
        Parsed::Action(a) => match validate_action(model, &run.context.state, &a) {
            Ok(()) => Correction::Accepted(TrainingInstance::action(
                model,
                &run.command,
                &run.context,
                &a,
            )),
            Err(v) => Correction::NonAdherent {
                reason: v.code().to_string(),
            },
        },
        Parsed::Explanation(text) => Correction::Accepted(TrainingInstance::explanation(
            model,
            &run.command,
            &run.context,
            &text,
        )),
    })
}

/// Fine-tunes the student on a batch file and returns the new checkpoint.
pub trait Trainer {
    fn train(&mut self, batch: &Path) -> Result<Option<String>, TrainerError>;
}

impl<F> Trainer for F
where
    F: FnMut(&Path) -> Result<Option<String>, TrainerError>,
{
    fn train(&mut self, batch: &Path) -> Result<Option<String>, TrainerError> {
        self(batch)
    }
}

/// Runs a shell command with the batch path as its last argument. The last
/// non-empty line of stdout, if any, names the new checkpoint.
#[derive(Debug, Clone)]
pub struct CommandTrainer {
    command: String,
}

impl CommandTrainer {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
        }
    }
}

impl Trainer for CommandTrainer {
    fn train(&mut self, batch: &Path) -> Result<Option<String>, TrainerError> {
        let out = Command::new("sh")
            .arg("-c")
            .arg(format!("{} \"$0\"", self.command))
            .arg(batch)
            .output()?;
        if !out.status.success() {
            return Err(TrainerError::Failed {
                status: out.status.to_string(),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        Ok(String::from_utf8_lossy(&out.stdout)
            .lines()
            .map(str::trim)
            .rfind(|l| !l.is_empty())
            .map(str::to_string))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    CorrectRate,
    NonAdherence,
    NoveltyStarvation,
    QueryLimit,
}

/// Counters for the stretch of the loop between two fine-tunes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub queries: usize,
    pub rejected_queries: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub accepted_corrections: usize,
    pub nonadherent_corrections: usize,
    pub correct_rate: Option<f64>,
    pub nonadherence_rate: Option<f64>,
    pub batch_file: Option<PathBuf>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationReport {
    pub termination: Termination,
    pub queries: usize,
    pub rounds: Vec<RoundStats>,
    pub batch_files: Vec<PathBuf>,
    /// Corrections still pending at the end, written to `pending.jsonl`.
    pub pending_action: usize,
    pub pending_explanation: usize,
}

/// Commands the loop must not repeat.
#[derive(Debug, Clone, Default)]
pub struct SeenCommands {
    /// Commands from training data; used for novelty only.
    pub train: Vec<String>,
    /// Hold-out test commands; used for novelty and never emitted.
    pub holdout: Vec<String>,
}

struct LoopState {
    seen: CommandHistory,
    holdout: BTreeSet<String>,
    pending_action: VecDeque<TrainingInstance>,
    pending_explanation: VecDeque<TrainingInstance>,
    correct: SlidingWindow,
    nonadherent: SlidingWindow,
    starved: usize,
    round: RoundStats,
}

impl LoopState {
    fn take_batch(&mut self, half: usize) -> Option<Vec<TrainingInstance>> {
        if self.pending_action.len() < half || self.pending_explanation.len() < half {
            return None;
        }
        let mut batch: Vec<_> = self.pending_action.drain(..half).collect();
        batch.extend(self.pending_explanation.drain(..half));
        Some(batch)
    }

    fn stop_reason(&self, config: &DistillationConfig) -> Option<Termination> {
        if self.correct.full_rate().is_some_and(|r| r > config.correct_rate_stop) {
            return Some(Termination::CorrectRate);
        }
        if self
            .nonadherent
            .full_rate()
            .is_some_and(|r| r > config.nonadherence_stop)
        {
            return Some(Termination::NonAdherence);
        }
        None
    }
}

/// Runs the loop until a stop rule fires, writing batch files and
/// `report.json` into `out_dir`.
pub fn run_distillation(
    student: &dyn GenerationBackend,
    teacher: &dyn GenerationBackend,
    model: &DeviceModel,
    config: &DistillationConfig,
    seen: &SeenCommands,
    trainer: &mut dyn Trainer,
    out_dir: &Path,
) -> Result<DistillationReport, DistillationError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rng = seeded_rng(config.seed);
    let attempts = config.max_retries;

    let mut state = LoopState {
        seen: CommandHistory::new(),
        holdout: seen.holdout.iter().cloned().collect(),
        pending_action: VecDeque::new(),
        pending_explanation: VecDeque::new(),
        correct: SlidingWindow::new(config.rate_window),
        nonadherent: SlidingWindow::new(config.rate_window),
        starved: 0,
        round: RoundStats {
            round: 1,
            ..RoundStats::default()
        },
    };
    for c in seen.train.iter().chain(&seen.holdout) {
        state.seen.record(teacher, c)?;
    }

    let mut rounds = Vec::new();
    let mut batch_files = Vec::new();
    let mut queries = 0usize;
    let mut kind = PromptKind::Action;

    let termination = loop {
        if config.max_queries.is_some_and(|m| queries >= m) {
            break Termination::QueryLimit;
        }
        if state.starved >= config.starvation_limit {
            break Termination::NoveltyStarvation;
        }
        let this_kind = kind;
        kind = match kind {
            PromptKind::Action => PromptKind::Explanation,
            PromptKind::Explanation => PromptKind::Action,
        };

        let command = synthesize_query(teacher, model, this_kind, attempts)?;
        queries += 1;
        state.round.queries += 1;
        let embedding = retrying(attempts, || teacher.embed(&command))?;
        // Exact repeats are refused for both kinds; otherwise a teacher stuck
        // on one explanation question would never starve the loop.
        if state.holdout.contains(&command)
            || state.seen.contains_exact(&command)
            || !check_novelty(this_kind, &embedding, &state.seen, config.novelty_threshold)
        {
            log::debug!("discarding non-novel {this_kind} command {command:?}");
            state.starved += 1;
            state.round.rejected_queries += 1;
            continue;
        }
        state.starved = 0;
        state.seen.push(command.clone(), embedding);

        let run = run_student(student, model, &command, this_kind, &mut rng, attempts)?;
        let verdict = judge(teacher, model, &run, attempts)?;
        state.correct.push(verdict.label);
        if verdict.label {
            state.round.correct += 1;
        } else {
            state.round.incorrect += 1;
            match synthesize_correction(teacher, model, &run, attempts)? {
                Correction::Accepted(inst) => {
                    state.nonadherent.push(false);
                    state.round.accepted_corrections += 1;
                    match inst.kind {
                        PromptKind::Action => state.pending_action.push_back(inst),
                        PromptKind::Explanation => state.pending_explanation.push_back(inst),
                    }
                }
                Correction::NonAdherent { reason } => {
                    log::info!("discarding non-adherent correction for {command:?}: {reason}");
                    state.nonadherent.push(true);
                    state.round.nonadherent_corrections += 1;
                }
            }
        }
        state.round.correct_rate = state.correct.rate();
        state.round.nonadherence_rate = state.nonadherent.rate();

        if let Some(reason) = state.stop_reason(config) {
            break reason;
        }

        if let Some(batch) = state.take_batch(config.batch_size / 2) {
            let path = out_dir.join(format!("batch-{:04}.jsonl", batch_files.len() + 1));
            jsonl::write(&path, &batch)?;
            batch_files.push(path.clone());
            let checkpoint = trainer
                .train(&path)
                .map_err(|source| DistillationError::Trainer {
                    batch: path.clone(),
                    source,
                })?;
            if let Some(ckpt) = &checkpoint {
                student.load_checkpoint(ckpt)?;
            }
            log::info!("round {} trained on {}", state.round.round, path.display());
            let next = state.round.round + 1;
            state.round.batch_file = Some(path);
            state.round.checkpoint = checkpoint;
            rounds.push(std::mem::replace(
                &mut state.round,
                RoundStats {
                    round: next,
                    ..RoundStats::default()
                },
            ));
            // The student changed; its old answers no longer describe it.
            state.correct.clear();
        }
    };
    rounds.push(state.round.clone());

    let leftovers: Vec<_> = state
        .pending_action
        .iter()
        .chain(&state.pending_explanation)
        .cloned()
        .collect();
    if !leftovers.is_empty() {
        jsonl::write(out_dir.join(PENDING_FILE), &leftovers)?;
    }
    let report = DistillationReport {
        termination,
        queries,
        rounds,
        batch_files,
        pending_action: state.pending_action.len(),
        pending_explanation: state.pending_explanation.len(),
    };
    std::fs::write(
        out_dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_model::Action;
    use crate::wire::{FnBackend, ScriptedBackend};

    #[test]
    fn window_rate_and_eviction() {
        let mut w = SlidingWindow::new(3);
        assert_eq!(w.rate(), None);
        w.push(true);
        w.push(false);
        assert_eq!(w.full_rate(), None);
        w.push(true);
        assert_eq!(w.full_rate(), Some(2.0 / 3.0));
        w.push(true);
        assert_eq!(w.full_rate(), Some(2.0 / 3.0));
        w.push(true);
        assert_eq!(w.full_rate(), Some(1.0));
        w.clear();
        assert!(w.is_empty());
    }

    #[test]
    fn verdicts_are_strictly_binary() {
        assert!(parse_verdict("True").label);
        assert!(parse_verdict("true. The lamp is off.").label);
        assert!(!parse_verdict("false").label);
        let maybe = parse_verdict("maybe");
        assert!(!maybe.label);
        assert_eq!(maybe.rationale, "judge-unparseable");
        assert_eq!(parse_verdict("").rationale, "judge-unparseable");
    }

    #[test]
    fn query_from_fixture_and_empty_retry() {
        let therm = DeviceModel::thermostat();
        let teacher = ScriptedBackend::from_responses(["[COMMAND]it's freezing in here[/COMMAND]"]);
        let c = synthesize_query(&teacher, &therm, PromptKind::Action, 3).unwrap();
        assert_eq!(c, "it's freezing in here");
        let p = &teacher.prompts()[0];
        for state in ["heat", "cool", "fan", "off"] {
            assert!(p.contains(&format!("\"{state}\":")), "{p}");
        }

        let empty = FnBackend::constant("[COMMAND][/COMMAND]");
        assert!(matches!(
            synthesize_query(&empty, &therm, PromptKind::Explanation, 2),
            Err(DistillationError::EmptyQuery(2))
        ));
    }

    #[test]
    fn novelty_rules() {
        let e = crate::wire::HashingEmbedder::default();
        let mut seen = CommandHistory::new();
        assert!(check_novelty(PromptKind::Action, &e.embed("x"), &seen, 0.85));
        seen.push("turn it off", e.embed("turn it off"));
        assert!(!check_novelty(PromptKind::Action, &e.embed("turn it off"), &seen, 0.85));
        assert!(check_novelty(PromptKind::Explanation, &e.embed("turn it off"), &seen, 0.85));
    }

    #[test]
    fn action_student_sees_off_state_sensors() {
        let therm = DeviceModel::thermostat();
        let student = ScriptedBackend::from_responses(["{\"state\":\"heat\",\"setpoint\":75}[/SETTINGS]"]);
        let mut rng = seeded_rng(1);
        let run = run_student(&student, &therm, "cold", PromptKind::Action, &mut rng, 1).unwrap();
        assert_eq!(run.context.state, "off");
        assert!(student.prompts()[0].contains("room_temperature"));
        assert_eq!(run.output.action(), Some(&Action::new("heat").with("setpoint", 75)));

        let student = ScriptedBackend::from_responses(["the lamp is on"]);
        let run = run_student(&student, &therm, "why?", PromptKind::Explanation, &mut rng, 1).unwrap();
        assert!(run.output.failure().is_some());
    }

    #[test]
    fn invalid_student_action_is_judged_locally() {
        let lamp = DeviceModel::lamp();
        let teacher = ScriptedBackend::from_responses(Vec::<String>::new());
        let run = StudentRun {
            command: "max brightness".into(),
            kind: PromptKind::Action,
            context: Snapshot::new("off"),
            output: parse_completion("{\"state\":\"on\",\"brightness\":500}[/SETTINGS]", PromptKind::Action),
        };
        let v = judge(&teacher, &lamp, &run, 1).unwrap();
        assert!(!v.label);
        assert_eq!(v.rationale, "invalid-action: out-of-range");
        assert!(teacher.prompts().is_empty());
    }

    #[test]
    fn corrections_are_gated_by_the_state_model() {
        let therm = DeviceModel::thermostat();
        let run = StudentRun {
            command: "too hot".into(),
            kind: PromptKind::Action,
            context: Snapshot::new("off").with("room_temperature", 81),
            output: parse_completion("{\"state\":\"heat\"}[/SETTINGS]", PromptKind::Action),
        };
        let good = ScriptedBackend::from_responses(["[SETTINGS]{\"state\":\"cool\",\"setpoint\":75}[/SETTINGS]"]);
        let Correction::Accepted(inst) = synthesize_correction(&good, &therm, &run, 1).unwrap() else {
            panic!("expected acceptance");
        };
        assert_eq!(inst.target().action(), Some(&Action::new("cool").with("setpoint", 75)));

        for reply in [
            "[SETTINGS]{\"state\":\"cool\",\"setpoint\":120}[/SETTINGS]",
            "[SETTINGS]{\"plan\":[\"red\",\"orange\",\"yellow\"]}[/SETTINGS]",
            "cycle through the colors of the rainbow",
        ] {
            let teacher = ScriptedBackend::from_responses([reply]);
            assert!(matches!(
                synthesize_correction(&teacher, &therm, &run, 1).unwrap(),
                Correction::NonAdherent { .. }
            ));
        }
    }

    #[test]
    fn command_trainer_reports_checkpoint_and_failure() {
        let dir = tempfile::tempdir().unwrap();
        let batch = dir.path().join("b.jsonl");
        std::fs::write(&batch, "").unwrap();
        let mut ok = CommandTrainer::new("echo training; echo ckpt-");
        assert_eq!(
            ok.train(&batch).unwrap(),
            Some(format!("ckpt- {}", batch.display()))
        );
        let mut bad = CommandTrainer::new("exit 3;");
        assert!(matches!(bad.train(&batch), Err(TrainerError::Failed { .. })));
    }

    #[test]
    fn config_checks() {
        assert!(DistillationConfig::default().validate().is_ok());
        for c in [
            DistillationConfig {
                batch_size: 3,
                ..Default::default()
            },
            DistillationConfig {
                correct_rate_stop: 0.0,
                ..Default::default()
            },
            DistillationConfig {
                rate_window: 0,
                ..Default::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
