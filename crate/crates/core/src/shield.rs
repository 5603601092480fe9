//! Task valuations by minimal reachability and δ-relative shields.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::TaskId;
use crate::behavior::AdversaryBehavior;
use crate::arena::Arena;
use crate::mdp::{GlobalState, Payload};
use crate::submdp::{build_from, rounds_to_decision, NodeId, NodeKind, SubMdp, SubMdpError, SubMdpView};

#[derive(Debug, Error, PartialEq)]
pub enum ShieldError {
    #[error("delta {0} is outside [0, 1]")]
    DeltaOutOfRange(f64),
    #[error("observed state is not part of the previous model")]
    StateNotInPreviousModel,
    #[error(transparent)]
    SubMdp(#[from] SubMdpError),
}

/// Minimal probability per task of reaching an unsafe state within the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskValuation {
    pub values: Vec<(TaskId, f64)>,
    pub optimal: f64,
}

impl TaskValuation {
    pub fn new(values: Vec<(TaskId, f64)>) -> Self {
        let optimal = values.iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min);
        Self { values, optimal }
    }

    pub fn value(&self, t: TaskId) -> Option<f64> {
        self.values.iter().find(|&&(x, _)| x == t).map(|&(_, v)| v)
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.values.iter().map(|&(t, _)| t)
    }
}

/// The tasks admitted at the next decision for a threshold δ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shield {
    pub allowed: Vec<TaskId>,
    pub delta: f64,
    pub valuation: TaskValuation,
}

impl Shield {
    pub fn allows(&self, t: TaskId) -> bool {
        self.allowed.contains(&t)
    }
}

/// Admits `t` iff `delta · value(t) ≤ optimal`.
pub fn make_shield(valuation: TaskValuation, delta: f64) -> Result<Shield, ShieldError> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(ShieldError::DeltaOutOfRange(delta));
    }
    let allowed = valuation
        .values
        .iter()
        .filter(|&&(_, v)| delta * v <= valuation.optimal)
        .map(|&(t, _)| t)
        .collect();
    Ok(Shield {
        allowed,
        delta,
        valuation,
    })
}

/// Backward induction over the DAG; returns the value of every node.
pub fn node_values<P>(view: &SubMdpView<'_, P>) -> Vec<f64> {
    let m = view.mdp;
    let mut values = vec![0.0; m.len()];
    for &v in m.topological().iter().rev() {
        values[v as usize] = node_value(view, v, &values);
    }
    values
}

fn node_value<P>(view: &SubMdpView<'_, P>, v: NodeId, values: &[f64]) -> f64 {
    let m = view.mdp;
    match m.kind(v) {
        NodeKind::Unsafe => 1.0,
        NodeKind::Frontier => 0.0,
        NodeKind::Move => {
            let c = &m.choices_of(v)[0];
            values[m.outcomes(c)[0].1 as usize]
        }
        NodeKind::AdversaryDecision => {
            let c = &m.choices_of(v)[0];
            m.outcomes(c)
                .iter()
                .map(|&(p, w)| p * values[w as usize])
                .sum()
        }
        NodeKind::AvatarDecision => view
            .choices(v)
            .map(|c| values[m.outcomes(c)[0].1 as usize])
            .fold(f64::INFINITY, f64::min),
    }
}

/// Minimal probability of eventually reaching an unsafe state from the root.
pub fn min_reach_probability<P>(view: &SubMdpView<'_, P>) -> f64 {
    node_values(view)[view.mdp.root() as usize]
}

/// Per-task node values: the shared part past the first decision is computed once,
/// then each task re-evaluates the first decision states and everything before them.
fn task_node_values<P>(m: &SubMdp<P>, tasks: &[TaskId]) -> Vec<Vec<f64>> {
    let shared = node_values(&m.view());
    let dd = m.decision_distance();
    let upstream: Vec<NodeId> = m
        .topological()
        .iter()
        .rev()
        .copied()
        .filter(|&v| m.distance(v) < dd || m.is_first_decision(v))
        .collect();
    tasks
        .iter()
        .map(|&t| {
            let view = SubMdpView {
                mdp: m,
                restriction: Some(t),
            };
            let mut values = shared.clone();
            for &v in &upstream {
                values[v as usize] = node_value(&view, v, &values);
            }
            values
        })
        .collect()
}

/// Tasks to value: those enabled at the first decision states, or every task at the
/// next decision location when no first decision state survives.
fn valued_tasks<P>(arena: &Arena, m: &SubMdp<P>) -> Vec<TaskId> {
    match m.tasks_of_first_decision() {
        Ok(t) => t,
        Err(_) => arena
            .tasks_at(m.next_decision_location())
            .map(|t| t.to_vec())
            .unwrap_or_default(),
    }
}

/// Task-valuation of the first decision states.
pub fn valuations<P>(m: &SubMdp<P>) -> Result<TaskValuation, ShieldError> {
    let tasks = m.tasks_of_first_decision()?;
    let per_task = task_node_values(m, &tasks);
    Ok(TaskValuation::new(
        tasks
            .iter()
            .zip(&per_task)
            .map(|(&t, vals)| (t, vals[m.root() as usize]))
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskBand {
    Green,
    Yellow,
    Orange,
    Red,
}

impl RiskBand {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskBand::Green => "green",
            RiskBand::Yellow => "yellow",
            RiskBand::Orange => "orange",
            RiskBand::Red => "red",
        }
    }
}

/// Upper bounds (inclusive) of the yellow and orange bands.
pub const YELLOW_MAX: f64 = 1.0 / 3.0;
pub const ORANGE_MAX: f64 = 2.0 / 3.0;

pub fn risk_band(value: f64) -> RiskBand {
    if value <= 0.0 {
        RiskBand::Green
    } else if value <= YELLOW_MAX {
        RiskBand::Yellow
    } else if value <= ORANGE_MAX {
        RiskBand::Orange
    } else {
        RiskBand::Red
    }
}

pub fn risk_bands(valuation: &TaskValuation) -> Vec<(TaskId, RiskBand)> {
    valuation
        .values
        .iter()
        .map(|&(t, v)| (t, risk_band(v)))
        .collect()
}

/// A solved sub-MDP: the model, its per-task node values and the node the valuation
/// is currently read at.
#[derive(Debug, Clone)]
pub struct ShieldModel<P> {
    submdp: Arc<SubMdp<P>>,
    tasks: Arc<Vec<TaskId>>,
    values: Arc<Vec<Vec<f64>>>,
    behaviors: Arc<Vec<AdversaryBehavior>>,
    root: NodeId,
}

impl<P: Payload> ShieldModel<P> {
    /// Builds and solves the sub-MDP rooted at `root`.
    pub fn solve<F>(
        arena: &Arena,
        behaviors: &[AdversaryBehavior],
        root: &GlobalState<P>,
        horizon: u32,
        unsafe_predicate: F,
    ) -> Result<Self, ShieldError>
    where
        F: Fn(&GlobalState<P>) -> bool,
    {
        let m = build_from(arena, behaviors, root, horizon, unsafe_predicate)?;
        Ok(Self::from_submdp(arena, m, behaviors))
    }

    pub fn from_submdp(arena: &Arena, m: SubMdp<P>, behaviors: &[AdversaryBehavior]) -> Self {
        let tasks = valued_tasks(arena, &m);
        let values = if m.first_decision_states().is_empty() {
            // No decision survives: every task inherits the unrestricted value.
            let v = node_values(&m.view());
            vec![v; tasks.len()]
        } else {
            task_node_values(&m, &tasks)
        };
        Self {
            submdp: Arc::new(m),
            tasks: Arc::new(tasks),
            values: Arc::new(values),
            behaviors: Arc::new(behaviors.to_vec()),
            root: 0,
        }
    }

    pub fn submdp(&self) -> &SubMdp<P> {
        &self.submdp
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn valuation(&self) -> TaskValuation {
        TaskValuation::new(
            self.tasks
                .iter()
                .zip(self.values.iter())
                .map(|(&t, vals)| (t, vals[self.root as usize]))
                .collect(),
        )
    }

    pub fn shield(&self, delta: f64) -> Result<Shield, ShieldError> {
        make_shield(self.valuation(), delta)
    }

    /// Same model read at the node of an observed state, if it was part of it.
    pub fn reroot(&self, arena: &Arena, observed: &GlobalState<P>) -> Option<Self> {
        let dd = self.submdp.decision_distance();
        let to_go = rounds_to_decision(arena, observed);
        let d = dd.checked_sub(to_go)?;
        let node = self.submdp.find(observed, d)?;
        Some(Self {
            root: node,
            ..self.clone()
        })
    }
}

/// Result of recomputing a shield after an adversary decision.
#[derive(Debug, Clone)]
pub struct ShieldUpdate<P> {
    pub shield: Shield,
    pub model: ShieldModel<P>,
    /// Whether the previous model's values were reused.
    pub reused: bool,
}

/// Shield for `root` computed from scratch.
pub fn compute_shield<P, F>(
    arena: &Arena,
    behaviors: &[AdversaryBehavior],
    root: &GlobalState<P>,
    horizon: u32,
    delta: f64,
    unsafe_predicate: F,
) -> Result<(Shield, ShieldModel<P>), ShieldError>
where
    P: Payload,
    F: Fn(&GlobalState<P>) -> bool,
{
    if !(0.0..=1.0).contains(&delta) {
        return Err(ShieldError::DeltaOutOfRange(delta));
    }
    let model = ShieldModel::solve(arena, behaviors, root, horizon, unsafe_predicate)?;
    Ok((model.shield(delta)?, model))
}

/// Shield after observing `observed`. Reuses the previous model's values when the
/// observed state is one of its nodes and the behaviours are unchanged; otherwise
/// builds a fresh sub-MDP rooted at `observed`.
pub fn update_shield<P, F>(
    arena: &Arena,
    behaviors: &[AdversaryBehavior],
    observed: &GlobalState<P>,
    horizon: u32,
    delta: f64,
    unsafe_predicate: F,
    previous: Option<&ShieldModel<P>>,
) -> Result<ShieldUpdate<P>, ShieldError>
where
    P: Payload,
    F: Fn(&GlobalState<P>) -> bool,
{
    if !(0.0..=1.0).contains(&delta) {
        return Err(ShieldError::DeltaOutOfRange(delta));
    }
    let reusable = previous.filter(|p| {
        p.submdp.horizon() == horizon && p.behaviors.as_slice() == behaviors
    });
    if let Some(model) = reusable.and_then(|p| p.reroot(arena, observed)) {
        return Ok(ShieldUpdate {
            shield: model.shield(delta)?,
            model,
            reused: true,
        });
    }
    let (shield, model) = compute_shield(arena, behaviors, observed, horizon, delta, unsafe_predicate)?;
    Ok(ShieldUpdate {
        shield,
        model,
        reused: false,
    })
}

/// Online shielding loop state: one model per avatar task, refreshed after adversary
/// decisions while a time budget allows.
#[derive(Debug, Clone)]
pub struct OnlineShield<P> {
    pub horizon: u32,
    pub delta: f64,
    /// Recomputations slower than this are discarded; `None` means unlimited.
    pub budget: Option<Duration>,
    model: Option<ShieldModel<P>>,
    shield: Option<Shield>,
    pub recomputations: usize,
    pub reuses: usize,
}

impl<P: Payload> OnlineShield<P> {
    pub fn new(horizon: u32, delta: f64, budget: Option<Duration>) -> Result<Self, ShieldError> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(ShieldError::DeltaOutOfRange(delta));
        }
        Ok(Self {
            horizon,
            delta,
            budget,
            model: None,
            shield: None,
            recomputations: 0,
            reuses: 0,
        })
    }

    pub fn current(&self) -> Option<&Shield> {
        self.shield.as_ref()
    }

    pub fn model(&self) -> Option<&ShieldModel<P>> {
        self.model.as_ref()
    }

    pub fn set_delta(&mut self, delta: f64) -> Result<(), ShieldError> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(ShieldError::DeltaOutOfRange(delta));
        }
        self.delta = delta;
        if let Some(m) = &self.model {
            self.shield = Some(m.shield(delta)?);
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.model = None;
        self.shield = None;
    }

    /// Fresh computation from a post-decision (or decision) state.
    pub fn compute<F>(
        &mut self,
        arena: &Arena,
        behaviors: &[AdversaryBehavior],
        root: &GlobalState<P>,
        unsafe_predicate: F,
    ) -> Result<&Shield, ShieldError>
    where
        F: Fn(&GlobalState<P>) -> bool,
    {
        let (shield, model) =
            compute_shield(arena, behaviors, root, self.horizon, self.delta, unsafe_predicate)?;
        self.model = Some(model);
        self.recomputations += 1;
        Ok(self.shield.insert(shield))
    }

    /// Refresh after an adversary decision. Keeps the previous shield if the
    /// recomputation overruns the budget. Returns whether the shield changed.
    pub fn observe<F>(
        &mut self,
        arena: &Arena,
        behaviors: &[AdversaryBehavior],
        observed: &GlobalState<P>,
        unsafe_predicate: F,
    ) -> Result<bool, ShieldError>
    where
        F: Fn(&GlobalState<P>) -> bool,
    {
        let started = Instant::now();
        let update = update_shield(
            arena,
            behaviors,
            observed,
            self.horizon,
            self.delta,
            unsafe_predicate,
            self.model.as_ref(),
        )?;
        if !update.reused {
            if let Some(b) = self.budget {
                if started.elapsed() > b && self.shield.is_some() {
                    return Ok(false);
                }
            }
            self.recomputations += 1;
        } else {
            self.reuses += 1;
        }
        let changed = self.shield.as_ref() != Some(&update.shield);
        self.model = Some(update.model);
        self.shield = Some(update.shield);
        Ok(changed)
    }
}
