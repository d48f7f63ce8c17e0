//! Embedding history for near-duplicate command detection.

use crate::wire::{cosine_similarity, BackendError, GenerationBackend};

/// Commands seen so far with their embeddings.
#[derive(Debug, Clone, Default)]
pub struct CommandHistory {
    entries: Vec<(String, Vec<f64>)>,
}

impl CommandHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, command: impl Into<String>, embedding: Vec<f64>) {
        self.entries.push((command.into(), embedding));
    }

    /// Embeds and records a command.
    pub fn record(
        &mut self,
        embedder: &dyn GenerationBackend,
        command: &str,
    ) -> Result<(), BackendError> {
        let e = embedder.embed(command)?;
        self.push(command, e);
        Ok(())
    }

    pub fn contains_exact(&self, command: &str) -> bool {
        self.entries.iter().any(|(c, _)| c == command)
    }

    pub fn commands(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(c, _)| c.as_str())
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    /// Highest cosine similarity against any recorded command; 0 when empty.
    /// Pairs where the similarity is undefined (a zero vector) count as 0.
    pub fn max_similarity(&self, embedding: &[f64]) -> f64 {
        self.entries
            .iter()
            .filter_map(|(_, e)| cosine_similarity(embedding, e).ok())
            .fold(0.0, f64::max)
    }
}
