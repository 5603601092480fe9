//! Safety-relevant MDP over agent positions, task queues and the turn counter.
//!
//! The MDP is never materialised; [`enabled_actions`] and [`successors`] explore it
//! on the fly. Agent 0 is the avatar, agents `1..=m` are adversaries.

use std::fmt::Debug;
use std::hash::Hash;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use thiserror::Error;

use crate::arena::{Arena, LocId, Task, TaskId};
use crate::behavior::{AdversaryBehavior, BehaviorError};

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("action {0:?} is not enabled")]
    ActionNotEnabled(Action),
    #[error("policy returned blocked task {0:?}")]
    PolicyReturnedBlockedTask(TaskId),
    #[error("no behavior for adversary {0}")]
    MissingBehavior(usize),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
}

/// Environment-specific state carried alongside positions, updated deterministically on
/// every move.
pub trait Payload: Clone + Eq + Hash + Debug + Send + Sync {
    fn after_move(&mut self, agent: usize, from: LocId, to: LocId);

    /// Whether `agent` may start `task` in this configuration. If no task at a location
    /// is permitted, every task is.
    fn permits(&self, _arena: &Arena, _agent: usize, _task: &Task) -> bool {
        true
    }

    /// The environment has ended; no further unsafe state is reachable.
    fn is_terminal(&self) -> bool {
        false
    }
}

impl Payload for () {
    fn after_move(&mut self, _agent: usize, _from: LocId, _to: LocId) {}
}

/// Remaining activities of one agent: the suffix of `task` starting at edge `next`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TaskQueue {
    task: Option<TaskId>,
    next: u16,
}

impl TaskQueue {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn full(task: TaskId) -> Self {
        Self { task: Some(task), next: 0 }
    }

    /// `task` with its first `done` edges already performed; empty when `done` covers it.
    pub fn partial(task: TaskId, done: usize, arena: &Arena) -> Self {
        if done >= arena.task(task).len() {
            Self::empty()
        } else {
            Self {
                task: Some(task),
                next: done as u16,
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.task.is_none()
    }

    pub fn task(&self) -> Option<TaskId> {
        self.task
    }

    /// Number of edges already performed from the current task.
    pub fn progress(&self) -> usize {
        self.next as usize
    }

    /// Remaining edge count.
    pub fn remaining(&self, arena: &Arena) -> usize {
        self.task
            .map_or(0, |t| arena.task(t).len() - self.next as usize)
    }

    pub fn head(&self, arena: &Arena) -> Option<(LocId, LocId)> {
        let t = arena.task(self.task?);
        let i = self.next as usize;
        Some((t.path()[i], t.path()[i + 1]))
    }

    pub fn edges(&self, arena: &Arena) -> Vec<(LocId, LocId)> {
        match self.task {
            None => Vec::new(),
            Some(t) => arena.task(t).edges().skip(self.next as usize).collect(),
        }
    }

    fn pop(&mut self, arena: &Arena) {
        if let Some(t) = self.task {
            self.next += 1;
            if self.next as usize >= arena.task(t).len() {
                *self = Self::empty();
            }
        }
    }
}

/// One entry per agent; stored inline for up to four agents.
pub type PerAgent<T> = smallvec::SmallVec<[T; 4]>;

/// A state `(positions, queues, turn)` plus the environment payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GlobalState<P> {
    pub positions: PerAgent<LocId>,
    pub queues: PerAgent<TaskQueue>,
    pub turn: usize,
    pub payload: P,
}

impl<P: Payload> GlobalState<P> {
    /// All queues empty, avatar to move.
    pub fn new(positions: Vec<LocId>, payload: P) -> Self {
        let n = positions.len();
        Self {
            positions: positions.into_iter().collect(),
            queues: smallvec::smallvec![TaskQueue::empty(); n],
            turn: 0,
            payload,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.positions.len()
    }

    /// Index of the last adversary (`m`).
    pub fn last_agent(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn with_task(mut self, agent: usize, task: TaskId) -> Self {
        self.queues[agent] = TaskQueue::full(task);
        self
    }

    pub fn validate(&self, arena: &Arena) -> Result<(), MdpError> {
        let invalid = |m: String| Err(MdpError::InvalidState(m));
        if self.positions.is_empty() || self.queues.len() != self.positions.len() {
            return invalid("positions and queues must be non-empty and of equal length".into());
        }
        if self.turn >= self.positions.len() {
            return invalid(format!("turn {} out of range", self.turn));
        }
        for (i, (q, &p)) in self.queues.iter().zip(&self.positions).enumerate() {
            if p.index() >= arena.num_locations() {
                return invalid(format!("agent {i} at unknown location"));
            }
            match q.head(arena) {
                Some((from, _)) if from != p => {
                    return invalid(format!("queue of agent {i} does not start at its position"))
                }
                None if !arena.is_decision(p) => {
                    return invalid(format!(
                        "agent {i} has an empty queue off a decision location"
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    /// Avatar picks a task at a decision state.
    DecideTask(TaskId),
    /// The active adversary draws its next task.
    AdvDecide,
    /// The active agent performs the head activity of its queue.
    Move,
}

/// Avatar's turn with an empty queue.
pub fn is_decision_state<P>(s: &GlobalState<P>) -> bool {
    s.turn == 0 && s.queues[0].is_empty()
}

/// Tasks the agent to move may start; falls back to all tasks when the payload permits none.
pub fn startable_tasks<P: Payload>(arena: &Arena, s: &GlobalState<P>, agent: usize) -> Vec<TaskId> {
    let Ok(all) = arena.tasks_at(s.positions[agent]) else {
        return Vec::new();
    };
    let permitted: Vec<TaskId> = all
        .iter()
        .copied()
        .filter(|&t| s.payload.permits(arena, agent, arena.task(t)))
        .collect();
    if permitted.is_empty() {
        all.to_vec()
    } else {
        permitted
    }
}

/// Avatar tasks at a decision state; empty otherwise.
pub fn avatar_tasks<P: Payload>(arena: &Arena, s: &GlobalState<P>) -> Vec<TaskId> {
    if is_decision_state(s) {
        startable_tasks(arena, s, 0)
    } else {
        Vec::new()
    }
}

/// Enabled actions. Empty only for malformed states (empty queue off a decision location).
pub fn enabled_actions<P: Payload>(arena: &Arena, s: &GlobalState<P>) -> Vec<Action> {
    let i = s.turn;
    if !s.queues[i].is_empty() {
        return vec![Action::Move];
    }
    if !arena.is_decision(s.positions[i]) {
        return Vec::new();
    }
    if i == 0 {
        startable_tasks(arena, s, 0)
            .into_iter()
            .map(Action::DecideTask)
            .collect()
    } else {
        vec![Action::AdvDecide]
    }
}

/// Outcome distribution of an adversary decision, renormalised over permitted tasks.
pub fn adversary_choices<P: Payload>(
    arena: &Arena,
    behaviors: &[AdversaryBehavior],
    s: &GlobalState<P>,
    agent: usize,
) -> Result<Vec<(f64, TaskId)>, MdpError> {
    let behavior = behaviors
        .get(agent - 1)
        .ok_or(MdpError::MissingBehavior(agent))?;
    let v = s.positions[agent];
    let support: Vec<(TaskId, f64)> = behavior.support(v).collect();
    let permitted: Vec<(TaskId, f64)> = support
        .iter()
        .copied()
        .filter(|&(t, _)| s.payload.permits(arena, agent, arena.task(t)))
        .collect();
    if support.is_empty() {
        return Err(MdpError::InvalidState(format!(
            "adversary {agent} has no task at '{}'",
            arena.name(v)
        )));
    }
    if permitted.is_empty() || permitted.len() == support.len() {
        return Ok(support.into_iter().map(|(t, p)| (p, t)).collect());
    }
    let total: f64 = permitted.iter().map(|&(_, p)| p).sum();
    Ok(permitted.into_iter().map(|(t, p)| (p / total, t)).collect())
}

/// Deterministic move of the active agent along its queue head.
pub fn apply_move<P: Payload>(arena: &Arena, s: &GlobalState<P>) -> Result<GlobalState<P>, MdpError> {
    let mut next = s.clone();
    move_in_place(arena, &mut next)?;
    Ok(next)
}

/// [`apply_move`] without copying the state.
pub fn move_in_place<P: Payload>(arena: &Arena, s: &mut GlobalState<P>) -> Result<(), MdpError> {
    let i = s.turn;
    let (from, to) = s.queues[i]
        .head(arena)
        .ok_or(MdpError::ActionNotEnabled(Action::Move))?;
    s.positions[i] = to;
    s.queues[i].pop(arena);
    s.turn = (i + 1) % s.num_agents();
    s.payload.after_move(i, from, to);
    Ok(())
}

/// Transition distribution of `(s, a)`.
pub fn successors<P: Payload>(
    arena: &Arena,
    behaviors: &[AdversaryBehavior],
    s: &GlobalState<P>,
    a: Action,
) -> Result<Vec<(f64, GlobalState<P>)>, MdpError> {
    let i = s.turn;
    match a {
        Action::Move => Ok(vec![(1.0, apply_move(arena, s)?)]),
        Action::DecideTask(t) => {
            if i != 0 || !s.queues[0].is_empty() || !startable_tasks(arena, s, 0).contains(&t) {
                return Err(MdpError::ActionNotEnabled(a));
            }
            let mut next = s.clone();
            next.queues[0] = TaskQueue::full(t);
            Ok(vec![(1.0, next)])
        }
        Action::AdvDecide => {
            if i == 0 || !s.queues[i].is_empty() || !arena.is_decision(s.positions[i]) {
                return Err(MdpError::ActionNotEnabled(a));
            }
            Ok(adversary_choices(arena, behaviors, s, i)?
                .into_iter()
                .map(|(p, t)| {
                    let mut next = s.clone();
                    next.queues[i] = TaskQueue::full(t);
                    (p, next)
                })
                .collect())
        }
    }
}

/// One agent's turn: task selection if its queue is empty, then one move.
///
/// `policy` receives the avatar's candidate tasks (the `allowed` set when given,
/// otherwise all enabled tasks) and must return one of them.
pub fn advance_turn<P, R, F>(
    arena: &Arena,
    behaviors: &[AdversaryBehavior],
    s: &GlobalState<P>,
    mut policy: F,
    allowed: Option<&[TaskId]>,
    rng: &mut R,
) -> Result<GlobalState<P>, MdpError>
where
    P: Payload,
    R: Rng + ?Sized,
    F: FnMut(&GlobalState<P>, &[TaskId]) -> TaskId,
{
    let mut cur = s.clone();
    let i = cur.turn;
    if cur.queues[i].is_empty() {
        if i == 0 {
            let enabled = startable_tasks(arena, &cur, 0);
            let candidates: Vec<TaskId> = match allowed {
                Some(a) => enabled.iter().copied().filter(|t| a.contains(t)).collect(),
                None => enabled.clone(),
            };
            let t = policy(&cur, &candidates);
            if !enabled.contains(&t) {
                return Err(MdpError::ActionNotEnabled(Action::DecideTask(t)));
            }
            if !candidates.contains(&t) {
                return Err(MdpError::PolicyReturnedBlockedTask(t));
            }
            cur.queues[0] = TaskQueue::full(t);
        } else {
            let choices = adversary_choices(arena, behaviors, &cur, i)?;
            let t = if choices.len() == 1 {
                choices[0].1
            } else {
                let index = WeightedIndex::new(choices.iter().map(|&(p, _)| p))
                    .map_err(|e| MdpError::InvalidState(e.to_string()))?;
                choices[index.sample(rng)].1
            };
            cur.queues[i] = TaskQueue::full(t);
        }
    }
    apply_move(arena, &cur)
}
