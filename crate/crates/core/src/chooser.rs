//! Arbitration between equivalent providers publishing to the same store.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::ProviderState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChooserMode {
    /// First Idle candidate in list order.
    PriorityWithBusySkip,
    /// Next Idle candidate after the previous pick.
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChooserPolicy {
    pub store_key: String,
    pub candidates: Vec<String>,
    pub mode: ChooserMode,
    #[serde(default)]
    pub fallback_on_failure: bool,
}

impl ChooserPolicy {
    pub fn priority(store_key: impl Into<String>, candidates: &[&str]) -> Self {
        Self {
            store_key: store_key.into(),
            candidates: candidates.iter().map(|c| c.to_string()).collect(),
            mode: ChooserMode::PriorityWithBusySkip,
            fallback_on_failure: false,
        }
    }

    pub fn round_robin(store_key: impl Into<String>, candidates: &[&str]) -> Self {
        Self {
            mode: ChooserMode::RoundRobin,
            ..Self::priority(store_key, candidates)
        }
    }

    pub fn with_fallback(mut self, fallback_on_failure: bool) -> Self {
        self.fallback_on_failure = fallback_on_failure;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChooseError {
    #[error("chooser for store {0:?} has no candidates")]
    EmptyCandidates(String),
    #[error("no state given for candidate {0:?}")]
    MissingState(String),
    #[error("all candidates for store {0:?} are busy or failed")]
    AllCandidatesUnavailable(String),
}

/// A policy plus the rotation cursor used by [`ChooserMode::RoundRobin`].
#[derive(Debug, Clone)]
pub struct Chooser {
    policy: ChooserPolicy,
    // Index where the next round-robin scan starts.
    cursor: usize,
}

impl Chooser {
    pub fn new(policy: ChooserPolicy) -> Result<Self, ChooseError> {
        if policy.candidates.is_empty() {
            return Err(ChooseError::EmptyCandidates(policy.store_key));
        }
        Ok(Self { policy, cursor: 0 })
    }

    pub fn policy(&self) -> &ChooserPolicy {
        &self.policy
    }

    /// Picks a candidate given a state for each of them.
    ///
    /// Idle candidates are always preferred. A Failed candidate is only
    /// returned when `fallback_on_failure` is set and nothing is Idle; a
    /// Running candidate is never returned.
    pub fn choose(&mut self, states: &HashMap<String, ProviderState>) -> Result<String, ChooseError> {
        let candidates = &self.policy.candidates;
        let mut resolved = Vec::with_capacity(candidates.len());
        for key in candidates {
            match states.get(key) {
                Some(state) => resolved.push(*state),
                None => return Err(ChooseError::MissingState(key.clone())),
            }
        }

        let n = candidates.len();
        let start = match self.policy.mode {
            ChooserMode::PriorityWithBusySkip => 0,
            ChooserMode::RoundRobin => self.cursor % n,
        };
        let scan = |wanted: ProviderState| {
            (0..n)
                .map(|i| (start + i) % n)
                .find(|&idx| resolved[idx] == wanted)
        };

        let picked = scan(ProviderState::Idle).or_else(|| {
            if self.policy.fallback_on_failure {
                scan(ProviderState::Failed)
            } else {
                None
            }
        });

        match picked {
            Some(idx) => {
                if self.policy.mode == ChooserMode::RoundRobin {
                    self.cursor = (idx + 1) % n;
                }
                Ok(candidates[idx].clone())
            }
            None => Err(ChooseError::AllCandidatesUnavailable(
                self.policy.store_key.clone(),
            )),
        }
    }
}

/// Stateless form of [`Chooser::choose`]: a fresh cursor every call.
pub fn choose(
    policy: &ChooserPolicy,
    states: &HashMap<String, ProviderState>,
) -> Result<String, ChooseError> {
    Chooser::new(policy.clone())?.choose(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ProviderState::*;

    fn states(pairs: &[(&str, ProviderState)]) -> HashMap<String, ProviderState> {
        pairs.iter().map(|(k, s)| (k.to_string(), *s)).collect()
    }

    #[test]
    fn idle_first_candidate_wins() {
        let p = ChooserPolicy::priority("out", &["A", "B"]);
        assert_eq!(choose(&p, &states(&[("A", Idle), ("B", Idle)])).unwrap(), "A");
    }

    #[test]
    fn busy_first_candidate_is_skipped() {
        let p = ChooserPolicy::priority("out", &["A", "B"]);
        assert_eq!(choose(&p, &states(&[("A", Running), ("B", Idle)])).unwrap(), "B");
    }

    #[test]
    fn failed_is_retried_only_with_fallback() {
        let s = states(&[("A", Failed), ("B", Running)]);
        let p = ChooserPolicy::priority("out", &["A", "B"]);
        assert!(matches!(
            choose(&p, &s),
            Err(ChooseError::AllCandidatesUnavailable(_))
        ));
        assert_eq!(choose(&p.with_fallback(true), &s).unwrap(), "A");
    }

    #[test]
    fn round_robin_rotates() {
        let mut c = Chooser::new(ChooserPolicy::round_robin("out", &["A", "B"])).unwrap();
        let s = states(&[("A", Idle), ("B", Idle)]);
        let picks: Vec<_> = (0..4).map(|_| c.choose(&s).unwrap()).collect();
        assert_eq!(picks, ["A", "B", "A", "B"]);
    }

    #[test]
    fn round_robin_skips_busy() {
        let mut c = Chooser::new(ChooserPolicy::round_robin("out", &["A", "B", "C"])).unwrap();
        let s = states(&[("A", Idle), ("B", Running), ("C", Idle)]);
        let picks: Vec<_> = (0..4).map(|_| c.choose(&s).unwrap()).collect();
        assert_eq!(picks, ["A", "C", "A", "C"]);
    }

    #[test]
    fn missing_state_is_reported() {
        let p = ChooserPolicy::priority("out", &["A", "B"]);
        assert_eq!(
            choose(&p, &states(&[("A", Running)])),
            Err(ChooseError::MissingState("B".into()))
        );
    }

    #[test]
    fn empty_candidates_rejected() {
        assert!(Chooser::new(ChooserPolicy::priority("out", &[])).is_err());
    }
}
