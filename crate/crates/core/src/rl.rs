//! Approximate Q-learning over corridor choices with optional shield filtering.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::TaskId;
use crate::shield::{OnlineShield, Shield, ShieldError};
use crate::snake::{
    apple_distances, is_unsafe, task_apple_distance, to_shield_state, SnakeError, SnakeGame,
    SnakePayload, AVATAR,
};

pub const FEATURES_V1: &str = "v1";

#[derive(Debug, Error)]
pub enum RlError {
    #[error("Q-function diverged: weight {index} is {value}")]
    DivergenceDetected { index: usize, value: f64 },
    #[error("feature length {got} does not match {expected} weights")]
    FeatureMismatch { got: usize, expected: usize },
    #[error("unknown feature set '{0}'")]
    UnknownFeatures(String),
    #[error("invalid learner config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Snake(#[from] SnakeError),
    #[error(transparent)]
    Shield(#[from] ShieldError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Linear Q-function; serialises as `{"weights":[...],"features":"v1"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    pub weights: Vec<f64>,
    pub features: String,
}

impl Default for QFunction {
    fn default() -> Self {
        Self {
            weights: vec![0.0; 2],
            features: FEATURES_V1.to_string(),
        }
    }
}

impl QFunction {
    pub fn value(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, x)| w * x).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serialisable")
    }

    pub fn from_json(s: &str) -> Result<Self, RlError> {
        let q: Self = serde_json::from_str(s)?;
        if q.features != FEATURES_V1 {
            return Err(RlError::UnknownFeatures(q.features));
        }
        if q.weights.len() != 2 {
            return Err(RlError::FeatureMismatch {
                got: q.weights.len(),
                expected: 2,
            });
        }
        Ok(q)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub episodes: usize,
    pub horizon: u32,
    pub delta: f64,
    /// Cap on shield recomputations after adversary decisions; 0 means unlimited.
    #[serde(default)]
    pub budget_ms: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.5,
            epsilon: 0.6,
            episodes: 800,
            horizon: 15,
            delta: 1.0,
            budget_ms: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("epsilon", self.epsilon), ("delta", self.delta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(RlError::InvalidConfig(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.horizon == 0 {
            return Err(RlError::InvalidConfig("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Feature set `v1`: a bias and the distance to the nearest own apple after taking
/// `task`, divided by the number of locations. Zero once no apple remains.
pub fn features(game: &SnakeGame, task: TaskId) -> Vec<f64> {
    let arena = game.arena();
    let apples = &game.payload().apples[AVATAR];
    if apples.is_empty() {
        return vec![1.0, 0.0];
    }
    let dist = apple_distances(arena, apples);
    let d = task_apple_distance(arena, task, apples, &dist).unwrap_or(arena.num_locations() as u32);
    vec![1.0, d as f64 / arena.num_locations() as f64]
}

/// `w ← w + α·(r + γ·next_best − w·f)·f`.
pub fn q_update(
    q: &QFunction,
    f: &[f64],
    reward: f64,
    next_best_q: f64,
    config: &LearnerConfig,
) -> Result<QFunction, RlError> {
    if f.len() != q.weights.len() {
        return Err(RlError::FeatureMismatch {
            got: f.len(),
            expected: q.weights.len(),
        });
    }
    let td = reward + config.gamma * next_best_q - q.value(f);
    let weights: Vec<f64> = q
        .weights
        .iter()
        .zip(f)
        .map(|(w, x)| w + config.alpha * td * x)
        .collect();
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite()) {
        return Err(RlError::DivergenceDetected { index, value });
    }
    Ok(QFunction {
        weights,
        features: q.features.clone(),
    })
}

/// Candidate tasks: the shield's allowed set if given, otherwise every available task.
pub fn candidates(game: &SnakeGame, shield: Option<&Shield>) -> Vec<TaskId> {
    let available = game.available_tasks();
    match shield {
        Some(s) => {
            let allowed: Vec<TaskId> = available.iter().copied().filter(|&t| s.allows(t)).collect();
            if allowed.is_empty() {
                available
            } else {
                allowed
            }
        }
        None => available,
    }
}

/// ε-greedy choice among the candidates; greedy ties go to the lowest task index.
pub fn select_task<R: Rng + ?Sized>(
    q: &QFunction,
    game: &SnakeGame,
    shield: Option<&Shield>,
    epsilon: f64,
    rng: &mut R,
) -> TaskId {
    let mut cands = candidates(game, shield);
    cands.sort();
    if rng.random::<f64>() < epsilon {
        return cands[rng.random_range(0..cands.len())];
    }
    greedy(q, game, &cands).0
}

fn greedy(q: &QFunction, game: &SnakeGame, cands: &[TaskId]) -> (TaskId, f64) {
    let mut best = (cands[0], f64::NEG_INFINITY);
    for &t in cands {
        let v = q.value(&features(game, t));
        if v > best.1 {
            best = (t, v);
        }
    }
    best
}

/// Keeps the online shield of a running game current: a model per avatar task,
/// refreshed after adversary decisions and read at the avatar's decisions.
#[derive(Debug, Clone)]
pub struct ShieldDriver {
    pub online: OnlineShield<SnakePayload>,
}

impl ShieldDriver {
    pub fn new(horizon: u32, delta: f64) -> Result<Self, ShieldError> {
        Self::with_budget(horizon, delta, 0)
    }

    /// `budget_ms` of 0 means unlimited.
    pub fn with_budget(horizon: u32, delta: f64, budget_ms: u64) -> Result<Self, ShieldError> {
        let budget = (budget_ms > 0).then(|| std::time::Duration::from_millis(budget_ms));
        Ok(Self {
            online: OnlineShield::new(horizon, delta, budget)?,
        })
    }

    /// Shield for the decision the game is waiting on.
    pub fn at_decision(&mut self, game: &SnakeGame) -> Result<Shield, RlError> {
        let s = to_shield_state(game)?;
        if self.online.model().is_some() {
            self.online.observe(game.arena(), &game.behaviors(), &s, is_unsafe)?;
        } else {
            self.online.compute(game.arena(), &game.behaviors(), &s, is_unsafe)?;
        }
        Ok(self.online.current().expect("computed").clone())
    }

    /// Starts the look-ahead for the next decision right after the avatar committed.
    pub fn after_choice(&mut self, game: &SnakeGame) -> Result<(), RlError> {
        let s = to_shield_state(game)?;
        self.online.compute(game.arena(), &game.behaviors(), &s, is_unsafe)?;
        Ok(())
    }

    /// Returns whether the shield changed.
    pub fn after_adversary_decision(
        &mut self,
        game: &SnakeGame,
        observed: &crate::mdp::GlobalState<SnakePayload>,
    ) -> Result<bool, RlError> {
        Ok(self.online.observe(game.arena(), &game.behaviors(), observed, is_unsafe)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub reward: f64,
    pub won: bool,
    pub collision: bool,
    pub ticks: u32,
}

/// Plays one game. With `learn` the Q-function is updated after every completed task.
pub fn run_episode<R: Rng + ?Sized>(
    game: &mut SnakeGame,
    q: &mut QFunction,
    config: &LearnerConfig,
    mut shield: Option<&mut ShieldDriver>,
    epsilon: f64,
    learn: bool,
    rng: &mut R,
) -> Result<EpisodeResult, RlError> {
    let mut total = 0.0;
    let mut pending: Option<(Vec<f64>, f64)> = None;
    while game.is_running() {
        if game.at_decision() {
            let s = match shield.as_deref_mut() {
                Some(d) => Some(d.at_decision(game)?),
                None => None,
            };
            if learn {
                if let Some((f, r)) = pending.take() {
                    let mut cands = candidates(game, s.as_ref());
                    cands.sort();
                    let next_best = greedy(q, game, &cands).1;
                    *q = q_update(q, &f, r, next_best, config)?;
                }
            }
            let t = select_task(q, game, s.as_ref(), epsilon, rng);
            pending = Some((features(game, t), 0.0));
            game.choose(t)?;
            if let Some(d) = shield.as_deref_mut() {
                d.after_choice(game)?;
            }
        }
        let ev = game.step()?;
        total += ev.reward;
        if let Some((_, r)) = pending.as_mut() {
            *r += ev.reward;
        }
        if let (Some(d), Some(obs)) = (shield.as_deref_mut(), ev.adversary_decision.as_ref()) {
            if game.is_running() {
                d.after_adversary_decision(game, obs)?;
            }
        }
    }
    if learn {
        if let Some((f, r)) = pending.take() {
            *q = q_update(q, &f, r, 0.0, config)?;
        }
    }
    Ok(EpisodeResult {
        reward: total,
        won: game.status() == crate::snake::GameStatus::AvatarWon,
        collision: game.avatar_collided(),
        ticks: game.tick(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shield::{make_shield, TaskValuation};
    use crate::snake::{new_game, SnakeConfig, SnakeMap, SMALL_SNAKE_MAP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn game(seed: u64) -> SnakeGame {
        new_game(&SnakeMap::parse(SMALL_SNAKE_MAP).unwrap(), seed, SnakeConfig::default()).unwrap()
    }

    #[test]
    fn update_arithmetic() {
        let c = LearnerConfig::default();
        let q = QFunction {
            weights: vec![0.0],
            features: FEATURES_V1.into(),
        };
        let q1 = q_update(&q, &[1.0], 10.0, 0.0, &c).unwrap();
        assert!((q1.weights[0] - 1.0).abs() < 1e-12);
        let q2 = q_update(&q1, &[0.0], 10.0, 3.0, &c).unwrap();
        assert_eq!(q2.weights, q1.weights);
        let c0 = LearnerConfig { alpha: 0.0, ..c.clone() };
        assert_eq!(q_update(&q1, &[1.0], 5.0, 1.0, &c0).unwrap().weights, q1.weights);
        let big = QFunction {
            weights: vec![f64::MAX],
            features: FEATURES_V1.into(),
        };
        assert!(matches!(
            q_update(&big, &[1.0], f64::MAX, f64::MAX, &c),
            Err(RlError::DivergenceDetected { .. })
        ));
    }

    #[test]
    fn distance_feature() {
        let g = game(7);
        let a = g.arena();
        let apples = g.payload().apples[AVATAR].clone();
        let dist = apple_distances(a, &apples);
        for t in g.available_tasks() {
            let f = features(&g, t);
            let d = task_apple_distance(a, t, &apples, &dist).unwrap();
            assert_eq!(f[1], d as f64 / a.num_locations() as f64);
            if apples.contains(&a.task(t).end()) {
                assert_eq!(f[1], 0.0);
            }
        }
    }

    #[test]
    fn select_respects_shield_and_epsilon() {
        let g = game(1);
        let ts = g.available_tasks();
        assert_eq!(ts.len(), 2, "the neck blocks one of the three corridors");
        let mut g = game(1);
        let t0 = ts[0];
        g.choose(t0).unwrap();
        while !g.at_decision() {
            g.step().unwrap();
        }
        let ts = g.available_tasks();
        assert!(ts.len() >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = QFunction {
            weights: vec![0.0, -1.0],
            features: FEATURES_V1.into(),
        };
        let greedy_pick = select_task(&q, &g, None, 0.0, &mut rng);
        let vals = TaskValuation::new(
            ts.iter()
                .map(|&t| (t, if t == greedy_pick { 0.9 } else { 0.1 }))
                .collect(),
        );
        let s = make_shield(vals, 1.0).unwrap();
        for _ in 0..200 {
            let t = select_task(&q, &g, Some(&s), 0.6, &mut rng);
            assert!(s.allows(t));
            assert_ne!(t, greedy_pick);
        }
        // ε = 1 is uniform over the candidates.
        let n = 30000;
        let mut counts = vec![0usize; ts.len()];
        let mut sorted = ts.clone();
        sorted.sort();
        for _ in 0..n {
            let t = select_task(&q, &g, None, 1.0, &mut rng);
            counts[sorted.iter().position(|&x| x == t).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / ts.len() as f64).abs() < 0.02);
        }
    }

    #[test]
    fn weights_json() {
        let q = QFunction {
            weights: vec![0.5, -2.0],
            features: FEATURES_V1.into(),
        };
        let s = q.to_json();
        assert_eq!(s, r#"{"weights":[0.5,-2.0],"features":"v1"}"#);
        assert_eq!(QFunction::from_json(&s).unwrap(), q);
        assert!(QFunction::from_json(r#"{"weights":[1.0],"features":"v2"}"#).is_err());
    }

    #[test]
    fn episodes_finish_and_learn() {
        let c = LearnerConfig { horizon: 6, ..Default::default() };
        let mut q = QFunction::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..5 {
            let mut g = game(seed);
            let mut d = ShieldDriver::new(c.horizon, 1.0).unwrap();
            let r = run_episode(&mut g, &mut q, &c, Some(&mut d), 0.6, true, &mut rng).unwrap();
            assert!(!g.is_running());
            assert!(r.reward >= 0.0);
        }
        assert!(q.weights.iter().all(|w| w.is_finite()));
        assert_ne!(q.weights, QFunction::default().weights);
    }
}
