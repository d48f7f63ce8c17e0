//! Evaluation metrics: judge-labelled setting accuracy, action-set Jaccard,
//! ROUGE for explanations, and a latency harness for a running device.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::prompts;
use crate::runtime::{DeviceInstance, RuntimeError};
use crate::state_model::{validate_action, Action, DeviceModel, Snapshot, STATE_KEY};
use crate::text::{tokenize, whitespace_tokens};
use crate::snapshot_gen::{random_snapshot_in, seeded_rng};
use crate::wire::{
    action_json, parse_completion, render_action_prompt, render_explanation_prompt, BackendError,
    GenerationBackend, ModelOutput, Parsed, PromptKind, TrainingInstance,
};

/// Two-sided 90% normal quantile.
pub const Z_90: f64 = 1.644_853_626_951_472_2;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// |a ∩ b| / |a ∪ b|; two empty sets score 0.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        log::warn!("jaccard of two empty sets is taken as 0");
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Jaccard similarity of two action sets, ignoring actions into the `off` state.
pub fn jaccard_actions<'a>(
    generated: impl IntoIterator<Item = &'a Action>,
    training: impl IntoIterator<Item = &'a Action>,
) -> f64 {
    let keep = |it: &mut dyn Iterator<Item = &'a Action>| -> BTreeSet<&'a Action> {
        it.filter(|a| a.state != "off").collect()
    };
    jaccard(
        &keep(&mut generated.into_iter()),
        &keep(&mut training.into_iter()),
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 || cand == 0 || reference == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn rouge_n_tokens(cand: &[String], reference: &[String], n: usize) -> f64 {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = c
        .iter()
        .map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0)))
        .sum();
    f1(
        overlap,
        cand.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-N over clipped n-gram counts.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    assert!(n > 0, "n-gram order must be positive");
    rouge_n_tokens(&tokenize(candidate), &tokenize(reference), n)
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F-measures; all zero if either side is empty.
pub fn rouge_scores(candidate: &str, reference: &str) -> RougeScores {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return RougeScores::default();
    }
    RougeScores {
        rouge1: rouge_n_tokens(&c, &r, 1),
        rouge2: rouge_n_tokens(&c, &r, 2),
        rouge_l: f1(lcs_len(&c, &r), c.len(), r.len()),
    }
}

/// For each output, the best score per metric over all references; averaged
/// over outputs.
pub fn best_match_rouge(outputs: &[String], references: &[String]) -> RougeScores {
    if outputs.is_empty() {
        return RougeScores::default();
    }
    let mut total = RougeScores::default();
    for o in outputs {
        let mut best = RougeScores::default();
        for r in references {
            let s = rouge_scores(o, r);
            best.rouge1 = best.rouge1.max(s.rouge1);
            best.rouge2 = best.rouge2.max(s.rouge2);
            best.rouge_l = best.rouge_l.max(s.rouge_l);
        }
        total.rouge1 += best.rouge1;
        total.rouge2 += best.rouge2;
        total.rouge_l += best.rouge_l;
    }
    let n = outputs.len() as f64;
    RougeScores {
        rouge1: total.rouge1 / n,
        rouge2: total.rouge2 / n,
        rouge_l: total.rouge_l / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub jaccard: f64,
    #[serde(flatten)]
    pub rouge: RougeScores,
}

/// A proportion with its 90% normal-approximation half-width.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub correct: usize,
    pub total: usize,
    pub fraction: f64,
    pub ci90_half_width: f64,
}

impl Proportion {
    pub fn new(correct: usize, total: usize) -> Self {
        if total == 0 {
            return Self::default();
        }
        let p = correct as f64 / total as f64;
        Self {
            correct,
            total,
            fraction: p,
            ci90_half_width: Z_90 * (p * (1.0 - p) / total as f64).sqrt(),
        }
    }
}

/// One student response to be judged.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub command: String,
    pub kind: PromptKind,
    /// Device state when the command was given.
    pub context: Snapshot,
    pub output: ModelOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgedBy {
    Local,
    Judge,
    Unjudged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialJudgement {
    pub command: String,
    pub kind: PromptKind,
    pub judged_by: JudgedBy,
    pub correct: Option<bool>,
    /// Field groups the trial is scored on.
    pub relevant_fields: Vec<String>,
    pub incorrect_fields: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: Proportion,
    pub per_kind: BTreeMap<PromptKind, Proportion>,
    /// Keyed by field group (`state`, settings, sensors; grouped fields such as `color`).
    pub per_field: IndexMap<String, Proportion>,
    pub unjudged: usize,
    pub trials: Vec<TrialJudgement>,
}

/// Reads `{"correct": bool, "incorrect_fields": [..]}` from a judge reply.
/// Text around the outermost braces is ignored.
pub fn parse_evaluation(reply: &str) -> Option<(bool, Vec<String>)> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end < start {
        return None;
    }
    let v: Value = serde_json::from_str(&reply[start..=end]).ok()?;
    let correct = v.get("correct")?.as_bool()?;
    let fields = match v.get("incorrect_fields") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(xs)) => xs
            .iter()
            .map(|x| x.as_str().map(str::to_string))
            .collect::<Option<Vec<_>>>()?,
        Some(_) => return None,
    };
    Some((correct, fields))
}

fn field_groups<'a>(model: &'a DeviceModel, names: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = vec![STATE_KEY.to_string()];
    for n in names {
        let g = model.field_group(n).to_string();
        if !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

fn all_fields(model: &DeviceModel, kind: PromptKind) -> Vec<String> {
    let mut names = model.setting_universe();
    if kind == PromptKind::Explanation {
        names.extend(model.sensor_universe());
    }
    field_groups(model, names.into_iter())
}

fn relevant_fields(model: &DeviceModel, trial: &Trial) -> Vec<String> {
    let state = match (&trial.output.parsed, trial.kind) {
        (Parsed::Action(a), PromptKind::Action) => &a.state,
        _ => &trial.context.state,
    };
    let Some(t) = model.template(state) else {
        return all_fields(model, trial.kind);
    };
    let names: Vec<&str> = match trial.kind {
        PromptKind::Action => t.settings.keys().map(String::as_str).collect(),
        PromptKind::Explanation => t.fields().map(|(n, _)| n).collect(),
    };
    field_groups(model, names.into_iter())
}

fn judge_trial(judge: &dyn GenerationBackend, model: &DeviceModel, trial: &Trial) -> TrialJudgement {
    let mut j = TrialJudgement {
        command: trial.command.clone(),
        kind: trial.kind,
        judged_by: JudgedBy::Local,
        correct: Some(false),
        relevant_fields: Vec::new(),
        incorrect_fields: Vec::new(),
        note: None,
    };
    let local_failure = match &trial.output.parsed {
        Parsed::Failure(f) => Some(format!("parse-failure: {}", f.code())),
        Parsed::Action(a) => validate_action(model, &trial.context.state, a)
            .err()
            .map(|v| format!("invalid-action: {}", v.code())),
        Parsed::Explanation(_) => None,
    };
    if let Some(note) = local_failure {
        j.relevant_fields = all_fields(model, trial.kind);
        j.incorrect_fields = j.relevant_fields.clone();
        j.note = Some(note);
        return j;
    }

    let response = match &trial.output.parsed {
        Parsed::Action(a) => action_json(model, a),
        Parsed::Explanation(t) => t.clone(),
        Parsed::Failure(_) => unreachable!("handled above"),
    };
    let prompt = prompts::evaluation(model, trial.kind, &trial.command, &trial.context, &response);
    let reply = match judge.generate(&prompt) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("judge failed on {:?}: {e}", trial.command);
            j.judged_by = JudgedBy::Unjudged;
            j.correct = None;
            j.note = Some(e.to_string());
            return j;
        }
    };
    let Some((correct, fields)) = parse_evaluation(&reply) else {
        log::warn!("unparseable judge reply for {:?}: {reply:?}", trial.command);
        j.judged_by = JudgedBy::Unjudged;
        j.correct = None;
        j.note = Some("judge-unparseable".into());
        return j;
    };
    j.judged_by = JudgedBy::Judge;
    j.correct = Some(correct);
    j.relevant_fields = relevant_fields(model, trial);
    let known = all_fields(model, PromptKind::Explanation);
    for f in fields {
        let g = model.field_group(&f).to_string();
        if !known.contains(&g) {
            log::warn!("judge named unknown field `{f}`");
            continue;
        }
        if !j.relevant_fields.contains(&g) {
            j.relevant_fields.push(g.clone());
        }
        if !j.incorrect_fields.contains(&g) {
            j.incorrect_fields.push(g);
        }
    }
    j
}

/// Judges every trial and aggregates per kind and per field. Trials whose
/// judge call fails are excluded from every denominator and counted.
pub fn setting_accuracy(
    trials: &[Trial],
    judge: &dyn GenerationBackend,
    model: &DeviceModel,
) -> Result<AccuracyReport, MetricsError> {
    if trials.is_empty() {
        return Err(MetricsError::Empty);
    }
    let judgements: Vec<TrialJudgement> =
        trials.iter().map(|t| judge_trial(judge, model, t)).collect();

    let mut overall = (0, 0);
    let mut per_kind: BTreeMap<PromptKind, (usize, usize)> = BTreeMap::new();
    let mut per_field: IndexMap<String, (usize, usize)> = all_fields(model, PromptKind::Explanation)
        .into_iter()
        .map(|f| (f, (0, 0)))
        .collect();
    let mut unjudged = 0;
    for j in &judgements {
        let Some(correct) = j.correct else {
            unjudged += 1;
            continue;
        };
        overall.1 += 1;
        overall.0 += usize::from(correct);
        let k = per_kind.entry(j.kind).or_default();
        k.1 += 1;
        k.0 += usize::from(correct);
        for f in &j.relevant_fields {
            let e = per_field.entry(f.clone()).or_default();
            e.1 += 1;
            e.0 += usize::from(!j.incorrect_fields.contains(f));
        }
    }
    Ok(AccuracyReport {
        overall: Proportion::new(overall.0, overall.1),
        per_kind: per_kind
            .into_iter()
            .map(|(k, (c, n))| (k, Proportion::new(c, n)))
            .collect(),
        per_field: per_field
            .into_iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(f, (c, n))| (f, Proportion::new(c, n)))
            .collect(),
        unjudged,
        trials: judgements,
    })
}

impl AccuracyReport {
    /// `field,correct,total,fraction,ci90_half_width` rows.
    pub fn per_field_csv(&self) -> String {
        let mut out = String::from("field,correct,total,fraction,ci90_half_width\n");
        for (f, p) in &self.per_field {
            out.push_str(&format!(
                "{f},{},{},{:.6},{:.6}\n",
                p.correct, p.total, p.fraction, p.ci90_half_width
            ));
        }
        out
    }
}

/// Runs the student on every test instance. Action commands start from a
/// seeded random snapshot in the initial state; explanation commands from
/// the instance's own snapshot.
pub fn collect_trials(
    student: &dyn GenerationBackend,
    model: &DeviceModel,
    test: &[TrainingInstance],
    seed: u64,
) -> Result<Vec<Trial>, BackendError> {
    let mut rng = seeded_rng(seed);
    let mut trials = Vec::with_capacity(test.len());
    for inst in test {
        let (context, prompt) = match inst.kind {
            PromptKind::Action => {
                let ctx = random_snapshot_in(model, model.initial_state(), &mut rng)
                    .expect("initial state is declared");
                let p = render_action_prompt(&inst.command, &model.ordered_sensors(&ctx));
                (ctx, p)
            }
            PromptKind::Explanation => {
                let p = render_explanation_prompt(model, &inst.command, &inst.snapshot);
                (inst.snapshot.clone(), p)
            }
        };
        let raw = student.generate(&prompt.text)?;
        trials.push(Trial {
            command: inst.command.clone(),
            kind: inst.kind,
            context,
            output: parse_completion(&raw, inst.kind),
        });
    }
    Ok(trials)
}

/// Compares generated actions and explanations against the training set.
pub fn similarity_report(trials: &[Trial], training: &[TrainingInstance]) -> SimilarityReport {
    let generated: Vec<&Action> = trials.iter().filter_map(|t| t.output.action()).collect();
    let targets: Vec<ModelOutput> = training.iter().map(TrainingInstance::target).collect();
    let train_actions: Vec<&Action> = targets.iter().filter_map(|t| t.action()).collect();
    let outputs: Vec<String> = trials
        .iter()
        .filter_map(|t| t.output.explanation().map(str::to_string))
        .collect();
    let references: Vec<String> = targets
        .iter()
        .filter_map(|t| t.explanation().map(str::to_string))
        .collect();
    SimilarityReport {
        jaccard: jaccard_actions(generated, train_actions),
        rouge: best_match_rouge(&outputs, &references),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyCommand {
    pub text: String,
    pub kind: PromptKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KindLatency {
    pub count: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub commands: usize,
    pub repetitions: usize,
    pub completed: usize,
    /// Whitespace-delimited tokens across all outputs.
    pub output_tokens: usize,
    pub total_seconds: f64,
    pub tokens_per_second: f64,
    pub per_kind: BTreeMap<PromptKind, KindLatency>,
    pub resident_memory_kb: Option<u64>,
    /// Set when the backend failed and the run stopped early.
    pub incomplete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Resident set size of this process, from `/proc/self/status`.
pub fn resident_memory_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmRSS:"))
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|n| n.parse().ok())
}

/// Sends every command `repetitions` times, one at a time, and times each.
pub fn run_latency_harness(
    instance: &mut DeviceInstance,
    backend: &dyn GenerationBackend,
    commands: &[LatencyCommand],
    repetitions: usize,
) -> Result<LatencyReport, MetricsError> {
    if commands.is_empty() || repetitions == 0 {
        return Err(MetricsError::Empty);
    }
    let mut samples: BTreeMap<PromptKind, Vec<f64>> = BTreeMap::new();
    let mut tokens = 0;
    let mut seconds = 0.0;
    let mut error = None;
    'outer: for _ in 0..repetitions {
        for c in commands {
            let started = Instant::now();
            let event = instance.handle_command(&c.text, c.kind, backend)?;
            let elapsed = started.elapsed().as_secs_f64();
            if let Some(e) = event.error.as_ref().filter(|e| e.stage == "backend") {
                error = Some(e.detail.clone());
                break 'outer;
            }
            seconds += elapsed;
            tokens += whitespace_tokens(&event.raw_output);
            samples.entry(c.kind).or_default().push(elapsed * 1000.0);
        }
    }
    let per_kind = samples
        .iter()
        .map(|(k, xs)| {
            let n = xs.len();
            (
                *k,
                KindLatency {
                    count: n,
                    mean_ms: xs.iter().sum::<f64>() / n as f64,
                    min_ms: xs.iter().copied().fold(f64::INFINITY, f64::min),
                    max_ms: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                },
            )
        })
        .collect();
    Ok(LatencyReport {
        commands: commands.len(),
        repetitions,
        completed: samples.values().map(Vec::len).sum(),
        output_tokens: tokens,
        total_seconds: seconds,
        tokens_per_second: if seconds > 0.0 { tokens as f64 / seconds } else { 0.0 },
        per_kind,
        resident_memory_kb: resident_memory_kb(),
        incomplete: error.is_some(),
        error,
    })
}
