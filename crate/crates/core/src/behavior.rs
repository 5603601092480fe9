//! Stochastic adversary behaviour: a task distribution per decision location.

use std::collections::{BTreeMap, HashMap};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::{Arena, ArenaError, LocId, TaskId};

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum BehaviorError {
    #[error("all weights are zero at '{0}'")]
    AllZeroWeights(String),
    #[error("invalid weights at '{location}': {reason}")]
    InvalidWeights { location: String, reason: String },
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error("behavior document: {0}")]
    Parse(String),
}

/// Distribution over `Task(v)` for every decision location `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryBehavior {
    /// Indexed by location; aligned with `arena.tasks_at(v)`; empty off decision locations.
    table: Vec<Vec<(TaskId, f64)>>,
}

impl AdversaryBehavior {
    /// Full distribution at `v`, zero-probability entries included.
    pub fn distribution(&self, v: LocId) -> &[(TaskId, f64)] {
        self.table.get(v.index()).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Tasks with positive probability at `v`.
    pub fn support(&self, v: LocId) -> impl Iterator<Item = (TaskId, f64)> + '_ {
        self.distribution(v).iter().copied().filter(|&(_, p)| p > 0.0)
    }

    pub fn probability(&self, v: LocId, t: TaskId) -> f64 {
        self.distribution(v)
            .iter()
            .find(|&&(x, _)| x == t)
            .map_or(0.0, |&(_, p)| p)
    }

    /// Checks normalisation and `supp(B(v)) ⊆ Task(v)` against `arena`.
    pub fn validate(&self, arena: &Arena) -> Result<(), BehaviorError> {
        for &v in arena.decision_locations() {
            let tasks = arena.tasks_at(v)?;
            let dist = self.distribution(v);
            let sum: f64 = dist.iter().map(|&(_, p)| p).sum();
            let invalid = |reason: String| BehaviorError::InvalidWeights {
                location: arena.name(v).to_string(),
                reason,
            };
            if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(invalid(format!("probabilities sum to {sum}")));
            }
            for &(t, p) in dist {
                if p > 0.0 && !tasks.contains(&t) {
                    return Err(invalid(format!("task {} not offered here", t.0)));
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid(format!("probability {p} out of range")));
                }
            }
        }
        Ok(())
    }

    /// Draws a task at `v`.
    pub fn sample_task<R: Rng + ?Sized>(
        &self,
        arena: &Arena,
        v: LocId,
        rng: &mut R,
    ) -> Result<TaskId, BehaviorError> {
        arena.tasks_at(v)?;
        let dist = self.distribution(v);
        if dist.len() == 1 {
            return Ok(dist[0].0);
        }
        let index = WeightedIndex::new(dist.iter().map(|&(_, p)| p))
            .map_err(|_| BehaviorError::AllZeroWeights(arena.name(v).to_string()))?;
        Ok(dist[index.sample(rng)].0)
    }

    /// Raw weights in arena task order, keyed by location name.
    pub fn to_weights(&self, arena: &Arena) -> BTreeMap<String, Vec<f64>> {
        arena
            .decision_locations()
            .iter()
            .map(|&v| {
                let w = self.distribution(v).iter().map(|&(_, p)| p).collect();
                (arena.name(v).to_string(), w)
            })
            .collect()
    }
}

/// Uniform choice among the tasks of every decision location.
pub fn uniform_behavior(arena: &Arena) -> AdversaryBehavior {
    let mut table = vec![Vec::new(); arena.num_locations()];
    for &v in arena.decision_locations() {
        let tasks = arena.tasks_at(v).expect("decision location");
        let p = 1.0 / tasks.len() as f64;
        table[v.index()] = tasks.iter().map(|&t| (t, p)).collect();
    }
    AdversaryBehavior { table }
}

/// Normalises per-location weights (in `tasks_at` order); uncovered locations are uniform.
pub fn weighted_behavior(
    arena: &Arena,
    weights: &HashMap<LocId, Vec<f64>>,
) -> Result<AdversaryBehavior, BehaviorError> {
    let mut behavior = uniform_behavior(arena);
    for (&v, w) in weights {
        let tasks = arena.tasks_at(v)?;
        let name = arena.name(v).to_string();
        if w.len() != tasks.len() {
            return Err(BehaviorError::InvalidWeights {
                location: name,
                reason: format!("{} weights for {} tasks", w.len(), tasks.len()),
            });
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(BehaviorError::InvalidWeights {
                location: name,
                reason: "weights must be finite and non-negative".into(),
            });
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(BehaviorError::AllZeroWeights(name));
        }
        behavior.table[v.index()] = tasks.iter().zip(w).map(|(&t, &x)| (t, x / total)).collect();
    }
    Ok(behavior)
}

/// Behaviour that always picks the given task at its start location.
pub fn deterministic_behavior(
    arena: &Arena,
    choice: impl Fn(LocId, &[TaskId]) -> TaskId,
) -> AdversaryBehavior {
    let mut table = vec![Vec::new(); arena.num_locations()];
    for &v in arena.decision_locations() {
        let tasks = arena.tasks_at(v).expect("decision location");
        let pick = choice(v, tasks);
        table[v.index()] = tasks
            .iter()
            .map(|&t| (t, if t == pick { 1.0 } else { 0.0 }))
            .collect();
    }
    AdversaryBehavior { table }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BehaviorDoc {
    pub agent: usize,
    pub weights: BTreeMap<String, Vec<f64>>,
}

/// Parses a behaviour document; returns the adversary index and its behaviour.
pub fn load_behavior(arena: &Arena, bytes: &[u8]) -> Result<(usize, AdversaryBehavior), BehaviorError> {
    let doc: BehaviorDoc = serde_json::from_slice(bytes).map_err(|e| {
        BehaviorError::Parse(format!("line {}, column {}: {e}", e.line(), e.column()))
    })?;
    let mut weights = HashMap::new();
    for (name, w) in doc.weights {
        let v = arena
            .find(&name)
            .ok_or_else(|| BehaviorError::Parse(format!("weights: unknown node id '{name}'")))?;
        weights.insert(v, w);
    }
    Ok((doc.agent, weighted_behavior(arena, &weights)?))
}

pub fn save_behavior(arena: &Arena, agent: usize, behavior: &AdversaryBehavior) -> Vec<u8> {
    let doc = BehaviorDoc {
        agent,
        weights: behavior.to_weights(arena),
    };
    serde_json::to_vec_pretty(&doc).expect("behavior document serialises")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::{gridworld_from_ascii, EXAMPLE_MAZE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_over_three_tasks() {
        let a = gridworld_from_ascii(EXAMPLE_MAZE).unwrap();
        let b = uniform_behavior(&a);
        let v = a.at(1, 3).unwrap();
        let d = b.distribution(v);
        assert_eq!(d.len(), 3);
        for &(_, p) in d {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        b.validate(&a).unwrap();
        let c = gridworld_from_ascii("...").unwrap();
        let ub = uniform_behavior(&c);
        assert_eq!(ub.distribution(c.at(1, 1).unwrap()), &[(a_task(&c, 1, 1), 1.0)]);
    }

    fn a_task(a: &Arena, x: i32, y: i32) -> TaskId {
        a.tasks_at(a.at(x, y).unwrap()).unwrap()[0]
    }

    #[test]
    fn weighted_normalises() {
        let a = gridworld_from_ascii(EXAMPLE_MAZE).unwrap();
        let v = a.at(1, 3).unwrap();
        let mut w = HashMap::new();
        w.insert(v, vec![2.0, 1.0, 1.0]);
        let b = weighted_behavior(&a, &w).unwrap();
        let probs: Vec<f64> = b.distribution(v).iter().map(|&(_, p)| p).collect();
        assert_eq!(probs, vec![0.5, 0.25, 0.25]);
        b.validate(&a).unwrap();

        w.insert(v, vec![0.0, 0.0, 0.0]);
        assert_eq!(
            weighted_behavior(&a, &w),
            Err(BehaviorError::AllZeroWeights("1,3".into()))
        );
        assert_eq!(weighted_behavior(&a, &HashMap::new()).unwrap(), uniform_behavior(&a));
    }

    #[test]
    fn sampling_frequencies() {
        let a = gridworld_from_ascii(EXAMPLE_MAZE).unwrap();
        let b = uniform_behavior(&a);
        let v = a.at(1, 3).unwrap();
        let tasks = a.tasks_at(v).unwrap().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            let t = b.sample_task(&a, v, &mut rng).unwrap();
            counts[tasks.iter().position(|&x| x == t).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02);
        }
        assert!(matches!(
            b.sample_task(&a, a.at(2, 3).unwrap(), &mut rng),
            Err(BehaviorError::Arena(ArenaError::NotADecisionLocation(_)))
        ));
    }

    #[test]
    fn singleton_support_always_sampled() {
        let a = gridworld_from_ascii(EXAMPLE_MAZE).unwrap();
        let b = deterministic_behavior(&a, |_, ts| ts[ts.len() - 1]);
        let v = a.at(1, 3).unwrap();
        let want = *a.tasks_at(v).unwrap().last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(b.sample_task(&a, v, &mut rng).unwrap(), want);
        }
        assert_eq!(b.support(v).count(), 1);
    }

    #[test]
    fn json_round_trip() {
        let a = gridworld_from_ascii(EXAMPLE_MAZE).unwrap();
        let mut w = HashMap::new();
        w.insert(a.at(1, 3).unwrap(), vec![2.0, 1.0, 1.0]);
        let b = weighted_behavior(&a, &w).unwrap();
        let bytes = save_behavior(&a, 1, &b);
        let (agent, back) = load_behavior(&a, &bytes).unwrap();
        assert_eq!(agent, 1);
        assert_eq!(back, b);
    }
}
