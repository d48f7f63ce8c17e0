//! Pseudo-random snapshot generation balanced by per-state template size.
//!
//! Each state `m` gets weight `|settings(t_m)| + |sensors(t_m)| + 1` and is
//! chosen with probability proportional to that weight. Field values are then
//! drawn uniformly and independently from their inclusive ranges.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state_model::{DeviceModel, ModelError, Snapshot};

/// Reference set size used for both bundled devices.
pub const DEFAULT_SET_SIZE: usize = 200;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("snapshot count must be at least 1")]
    ZeroCount,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub count: usize,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn new(count: usize, seed: u64) -> Result<Self, GenerationError> {
        if count == 0 {
            return Err(GenerationError::ZeroCount);
        }
        Ok(Self { count, seed })
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            count: DEFAULT_SET_SIZE,
            seed: 0,
        }
    }
}

/// Deterministic random stream used across the pipeline.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Unnormalized selection weight of a state.
pub fn state_weight(model: &DeviceModel, state: &str) -> Result<u64, ModelError> {
    let t = model
        .template(state)
        .ok_or_else(|| ModelError::UnknownState(state.to_string()))?;
    Ok(t.field_count() as u64 + 1)
}

/// Normalized selection probability of every state, in declaration order.
pub fn state_probabilities(model: &DeviceModel) -> Vec<(String, f64)> {
    let weights: Vec<u64> = model
        .states()
        .iter()
        .map(|s| state_weight(model, s).expect("declared state"))
        .collect();
    let total: u64 = weights.iter().sum();
    model
        .states()
        .iter()
        .zip(weights)
        .map(|(s, w)| (s.clone(), w as f64 / total as f64))
        .collect()
}

pub fn choose_state<'m, R: Rng + ?Sized>(model: &'m DeviceModel, rng: &mut R) -> &'m str {
    let states = model.states();
    let weights: Vec<u64> = states
        .iter()
        .map(|s| state_weight(model, s).expect("declared state"))
        .collect();
    let total: u64 = weights.iter().sum();
    let mut pick = rng.random_range(0..total);
    for (state, w) in states.iter().zip(weights) {
        if pick < w {
            return state;
        }
        pick -= w;
    }
    unreachable!("pick is below the weight total")
}

/// Random snapshot of a specific state.
pub fn random_snapshot_in<R: Rng + ?Sized>(
    model: &DeviceModel,
    state: &str,
    rng: &mut R,
) -> Result<Snapshot, ModelError> {
    let t = model
        .template(state)
        .ok_or_else(|| ModelError::UnknownState(state.to_string()))?;
    let values: BTreeMap<String, i64> = t
        .fields()
        .map(|(name, range)| (name.to_string(), rng.random_range(range.min..=range.max)))
        .collect();
    Ok(Snapshot {
        state: state.to_string(),
        values,
    })
}

pub fn random_snapshot<R: Rng + ?Sized>(model: &DeviceModel, rng: &mut R) -> Snapshot {
    let state = choose_state(model, rng);
    random_snapshot_in(model, state, rng).expect("chosen state is declared")
}

/// Generates `config.count` snapshots from a stream seeded with `config.seed`.
pub fn generate_set(model: &DeviceModel, config: &GenerationConfig) -> Vec<Snapshot> {
    let mut rng = seeded_rng(config.seed);
    (0..config.count)
        .map(|_| random_snapshot(model, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_model::validate_snapshot;

    #[test]
    fn weights_match_template_sizes() {
        let lamp = DeviceModel::lamp();
        assert_eq!(state_weight(&lamp, "on").unwrap(), 5);
        assert_eq!(state_weight(&lamp, "off").unwrap(), 1);
        let t = DeviceModel::thermostat();
        assert_eq!(state_weight(&t, "heat").unwrap(), 3);
        assert_eq!(state_weight(&t, "cool").unwrap(), 3);
        assert_eq!(state_weight(&t, "fan").unwrap(), 2);
        assert_eq!(state_weight(&t, "off").unwrap(), 2);
        assert!(state_weight(&t, "defrost").is_err());
    }

    #[test]
    fn probabilities_are_normalized() {
        let t = DeviceModel::thermostat();
        let p = state_probabilities(&t);
        assert_eq!(
            p,
            vec![
                ("heat".to_string(), 0.3),
                ("cool".to_string(), 0.3),
                ("fan".to_string(), 0.2),
                ("off".to_string(), 0.2),
            ]
        );
        let lamp = state_probabilities(&DeviceModel::lamp());
        assert!((lamp[0].1 - 1.0 / 6.0).abs() < 1e-12);
        assert!((lamp[1].1 - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_empty_state_is_always_chosen() {
        let model = DeviceModel::from_json(
            r#"{"device_name":"rock","states":["idle"],"templates":{"idle":{}}}"#,
        )
        .unwrap();
        let mut rng = seeded_rng(3);
        for _ in 0..100 {
            assert_eq!(choose_state(&model, &mut rng), "idle");
        }
        assert_eq!(
            random_snapshot(&model, &mut rng),
            Snapshot::new("idle")
        );
    }

    #[test]
    fn lamp_values_stay_in_range() {
        let lamp = DeviceModel::lamp();
        let mut rng = seeded_rng(11);
        for _ in 0..500 {
            let s = random_snapshot(&lamp, &mut rng);
            assert_eq!(validate_snapshot(&lamp, &s), Ok(()));
            if s.state == "on" {
                assert!((0..=100).contains(&s.values["brightness"]));
                for c in ["r", "g", "b"] {
                    assert!((0..=255).contains(&s.values[c]));
                }
            }
        }
    }

    #[test]
    fn forced_off_is_bare() {
        let lamp = DeviceModel::lamp();
        let s = random_snapshot_in(&lamp, "off", &mut seeded_rng(1)).unwrap();
        assert_eq!(s, Snapshot::new("off"));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let lamp = DeviceModel::lamp();
        let a = random_snapshot(&lamp, &mut seeded_rng(42));
        let b = random_snapshot(&lamp, &mut seeded_rng(42));
        assert_eq!(a, b);
    }

    #[test]
    fn generate_set_counts() {
        let lamp = DeviceModel::lamp();
        let t = DeviceModel::thermostat();
        let cfg = GenerationConfig::new(200, 7).unwrap();
        assert_eq!(generate_set(&lamp, &cfg).len(), 200);
        assert_eq!(generate_set(&t, &cfg).len(), 200);
        assert_eq!(generate_set(&t, &GenerationConfig::new(1, 7).unwrap()).len(), 1);
        assert_eq!(generate_set(&t, &cfg), generate_set(&t, &cfg));
        assert!(matches!(
            GenerationConfig::new(0, 1),
            Err(GenerationError::ZeroCount)
        ));
    }
}
