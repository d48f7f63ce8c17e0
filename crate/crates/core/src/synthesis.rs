//! Teacher-labelled bootstrap datasets.
//!
//! Each random snapshot is labelled twice by the teacher: once with an
//! action-oriented command whose target is the snapshot's settings, and once
//! with question/answer pairs about the snapshot's fields. Action commands
//! are kept diverse by re-prompting while a candidate is too similar to an
//! earlier one. Accepted tuples are rendered into training instances and
//! split, per kind, into train and hold-out test sets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl;
use crate::novelty::CommandHistory;
use crate::prompts;
use crate::snapshot_gen::seeded_rng;
use crate::state_model::{
    validate_action, validate_snapshot, Action, DeviceModel, Snapshot, Violation,
};
use crate::wire::{BackendError, GenerationBackend, HashingEmbedder, PromptKind, TrainingInstance};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("no snapshots to label")]
    NoSnapshots,
    #[error("invalid synthesis configuration: {0}")]
    Config(String),
    #[error("snapshot is invalid: {0}")]
    InvalidSnapshot(Violation),
    #[error("teacher produced no usable command after {0} attempts")]
    NoCommand(usize),
    #[error("teacher backend: {0}")]
    Backend(#[from] BackendError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
}

impl SynthesisError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, SynthesisError::Backend(e) if e.is_retryable())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Candidates at or above this similarity to an earlier command are re-prompted.
    pub similarity_threshold: f64,
    pub max_reprompts: usize,
    /// Explanation tuples kept per snapshot.
    pub per_snapshot_explanations: usize,
    /// Fraction of each kind held out for testing.
    pub split_fraction: f64,
    pub seed: u64,
    /// Attempts per teacher call on retryable backend errors.
    pub max_retries: usize,
    /// Keep action tuples whose command never cleared the similarity bar.
    pub keep_low_diversity: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: 0.85,
            max_reprompts: 5,
            per_snapshot_explanations: 1,
            split_fraction: 0.25,
            seed: 0,
            max_retries: 3,
            keep_low_diversity: false,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        let bad = |m: &str| Err(SynthesisError::Config(m.to_string()));
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return bad("similarity_threshold must lie in (0, 1]");
        }
        if self.max_reprompts == 0 {
            return bad("max_reprompts must be positive");
        }
        if self.per_snapshot_explanations == 0 {
            return bad("per_snapshot_explanations must be positive");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction must lie in (0, 1)");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTuple {
    pub command: String,
    pub action: Action,
    /// Set when no candidate cleared the similarity threshold.
    pub low_diversity: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationTuple {
    pub command: String,
    pub snapshot: Snapshot,
    pub explanation: String,
}

/// Asks the teacher for a command that would lead to `snapshot`'s settings.
///
/// Re-prompts up to `max_reprompts` times while the candidate's similarity to
/// `history` reaches the threshold; if none clears it, the least similar
/// candidate is returned with `low_diversity` set.
pub fn synthesize_action_tuple(
    teacher: &dyn GenerationBackend,
    model: &DeviceModel,
    snapshot: &Snapshot,
    history: &CommandHistory,
    config: &SynthesisConfig,
) -> Result<ActionTuple, SynthesisError> {
    validate_snapshot(model, snapshot).map_err(SynthesisError::InvalidSnapshot)?;
    let action = snapshot.to_action(model);
    let mut rejected: Vec<String> = Vec::new();
    let mut best: Option<(String, f64)> = None;
    let attempts = config.max_reprompts + 1;
    for _ in 0..attempts {
        let prompt = prompts::action_synthesis(model, snapshot, &action, &rejected);
        let command = prompts::extract_command(&teacher.generate(&prompt)?);
        if command.is_empty() {
            continue;
        }
        let similarity = history.max_similarity(&teacher.embed(&command)?);
        if similarity < config.similarity_threshold {
            return Ok(ActionTuple {
                command,
                action,
                low_diversity: false,
            });
        }
        if best.as_ref().is_none_or(|(_, s)| similarity < *s) {
            best = Some((command.clone(), similarity));
        }
        if !rejected.contains(&command) {
            rejected.push(command);
        }
    }
    let (command, _) = best.ok_or(SynthesisError::NoCommand(attempts))?;
    Ok(ActionTuple {
        command,
        action,
        low_diversity: true,
    })
}

/// Asks the teacher for question/answer pairs about each field of `snapshot`.
///
/// An unparseable reply yields no tuples (logged), not an error.
pub fn synthesize_explanation_tuples(
    teacher: &dyn GenerationBackend,
    model: &DeviceModel,
    snapshot: &Snapshot,
) -> Result<Vec<ExplanationTuple>, SynthesisError> {
    validate_snapshot(model, snapshot).map_err(SynthesisError::InvalidSnapshot)?;
    let reply = teacher.generate(&prompts::explanation_synthesis(model, snapshot))?;
    let pairs = prompts::extract_qa_pairs(&reply);
    if pairs.is_empty() {
        log::warn!("skipping unparseable explanation reply for snapshot in `{}`", snapshot.state);
    }
    Ok(pairs
        .into_iter()
        .map(|(command, explanation)| ExplanationTuple {
            command,
            snapshot: snapshot.clone(),
            explanation,
        })
        .collect())
}

fn with_retries<T>(
    attempts: usize,
    mut f: impl FnMut() -> Result<T, SynthesisError>,
) -> Result<T, SynthesisError> {
    let mut last = None;
    for _ in 0..attempts.max(1) {
        match f() {
            Err(e) if e.is_retryable() => {
                log::warn!("retrying teacher call: {e}");
                last = Some(e);
            }
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Why a tuple was left out of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub kind: PromptKind,
    pub command: String,
    pub reason: String,
}

/// Progress record for one labelled snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub snapshot_index: usize,
    pub instances: Vec<TrainingInstance>,
    #[serde(default)]
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisStats {
    pub snapshots: usize,
    pub resumed: usize,
    pub action_instances: usize,
    pub explanation_instances: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub train: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
    pub stats: SynthesisStats,
}

impl DatasetBundle {
    /// Writes `train.jsonl` and `test.jsonl` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        jsonl::write(dir.join(TRAIN_FILE), &self.train)?;
        jsonl::write(dir.join(TEST_FILE), &self.test)
    }

    pub fn read_from_dir(dir: &Path) -> std::io::Result<(Vec<TrainingInstance>, Vec<TrainingInstance>)> {
        Ok((
            jsonl::read(dir.join(TRAIN_FILE))?,
            jsonl::read(dir.join(TEST_FILE))?,
        ))
    }
}

fn label_snapshot(
    index: usize,
    model: &DeviceModel,
    snapshot: &Snapshot,
    teacher: &dyn GenerationBackend,
    history: &mut CommandHistory,
    config: &SynthesisConfig,
) -> Result<JournalRecord, SynthesisError> {
    let mut record = JournalRecord {
        snapshot_index: index,
        instances: Vec::new(),
        rejected: Vec::new(),
    };

    let tuple = with_retries(config.max_retries, || {
        synthesize_action_tuple(teacher, model, snapshot, history, config)
    })?;
    let verdict = validate_action(model, model.initial_state(), &tuple.action);
    if let Err(v) = verdict {
        log::warn!("rejecting action tuple `{}`: {v}", tuple.command);
        record.rejected.push(Rejection {
            kind: PromptKind::Action,
            command: tuple.command,
            reason: v.code().to_string(),
        });
    } else if tuple.low_diversity && !config.keep_low_diversity {
        log::warn!("rejecting low-diversity command `{}`", tuple.command);
        record.rejected.push(Rejection {
            kind: PromptKind::Action,
            command: tuple.command,
            reason: "low-diversity".into(),
        });
    } else {
        history.record(teacher, &tuple.command)?;
        record.instances.push(TrainingInstance::action(
            model,
            &tuple.command,
            snapshot,
            &tuple.action,
        ));
    }

    let mut tuples = with_retries(config.max_retries, || {
        synthesize_explanation_tuples(teacher, model, snapshot)
    })?;
    if tuples.is_empty() {
        record.rejected.push(Rejection {
            kind: PromptKind::Explanation,
            command: String::new(),
            reason: "unparseable".into(),
        });
    }
    let mut rng = seeded_rng(config.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    tuples.shuffle(&mut rng);
    for t in tuples.into_iter().take(config.per_snapshot_explanations) {
        record.instances.push(TrainingInstance::explanation(
            model,
            &t.command,
            &t.snapshot,
            &t.explanation,
        ));
    }
    Ok(record)
}

/// Labels every snapshot and splits the result into train and test sets.
///
/// With a `journal` path, each labelled snapshot is appended as it completes
/// and snapshots already present in the journal are not re-labelled.
pub fn build_bootstrap_dataset(
    model: &DeviceModel,
    snapshots: &[Snapshot],
    teacher: &dyn GenerationBackend,
    config: &SynthesisConfig,
    journal: Option<&Path>,
) -> Result<DatasetBundle, SynthesisError> {
    if snapshots.is_empty() {
        return Err(SynthesisError::NoSnapshots);
    }
    config.validate()?;

    let mut records: BTreeMap<usize, JournalRecord> = BTreeMap::new();
    if let Some(path) = journal.filter(|p| p.exists()) {
        for r in jsonl::read_tolerant::<JournalRecord>(path)? {
            records.insert(r.snapshot_index, r);
        }
    }
    let mut stats = SynthesisStats {
        snapshots: snapshots.len(),
        resumed: records.len(),
        ..SynthesisStats::default()
    };

    let mut history = CommandHistory::new();
    for r in records.values() {
        for i in r.instances.iter().filter(|i| i.kind == PromptKind::Action) {
            history.record(teacher, &i.command)?;
        }
    }

    for (index, snapshot) in snapshots.iter().enumerate() {
        if records.contains_key(&index) {
            continue;
        }
        let record = label_snapshot(index, model, snapshot, teacher, &mut history, config)?;
        if let Some(path) = journal {
            jsonl::append(path, &record)?;
        }
        records.insert(index, record);
    }

    let mut by_kind: BTreeMap<PromptKind, Vec<TrainingInstance>> = BTreeMap::new();
    for r in records.into_values() {
        stats.rejected += r.rejected.len();
        for inst in r.instances {
            by_kind.entry(inst.kind).or_default().push(inst);
        }
    }
    stats.action_instances = by_kind.get(&PromptKind::Action).map_or(0, Vec::len);
    stats.explanation_instances = by_kind.get(&PromptKind::Explanation).map_or(0, Vec::len);

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (kind, instances) in by_kind {
        let (tr, te) = split_instances(instances, config.split_fraction, config.seed, kind);
        train.extend(tr);
        test.extend(te);
    }
    Ok(DatasetBundle { train, test, stats })
}

/// Seeded hold-out split of one kind; both halves keep their input order.
fn split_instances(
    instances: Vec<TrainingInstance>,
    fraction: f64,
    seed: u64,
    kind: PromptKind,
) -> (Vec<TrainingInstance>, Vec<TrainingInstance>) {
    let n = instances.len();
    let n_test = ((n as f64) * fraction).round() as usize;
    let salt = match kind {
        PromptKind::Action => 0x41,
        PromptKind::Explanation => 0x45,
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed ^ salt));
    let test_idx: BTreeSet<usize> = order.into_iter().take(n_test).collect();
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (i, inst) in instances.into_iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(inst);
        } else {
            train.push(inst);
        }
    }
    (train, test)
}

/// A pair of train-split action commands that are too similar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityViolation {
    pub first: String,
    pub second: String,
    pub similarity: f64,
}

/// Post-hoc check that no two action commands in `instances` reach `threshold`.
pub fn audit_diversity(
    instances: &[TrainingInstance],
    threshold: f64,
    embedder: &HashingEmbedder,
) -> Vec<DiversityViolation> {
    let commands: Vec<(&str, Vec<f64>)> = instances
        .iter()
        .filter(|i| i.kind == PromptKind::Action)
        .map(|i| (i.command.as_str(), embedder.embed(&i.command)))
        .collect();
    let mut out = Vec::new();
    for (i, (a, ea)) in commands.iter().enumerate() {
        for (b, eb) in &commands[i + 1..] {
            if let Ok(s) = crate::wire::cosine_similarity(ea, eb) {
                if s >= threshold {
                    out.push(DiversityViolation {
                        first: a.to_string(),
                        second: b.to_string(),
                        similarity: s,
                    });
                }
            }
        }
    }
    out
}
