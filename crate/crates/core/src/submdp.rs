//! Finite-horizon sub-MDP rooted at the state following an avatar decision.
//!
//! States are pairs `(s, d)` where `d` counts completed rounds (a move of the last
//! agent increments it). Construction closes the root under decision and movement
//! actions up to `bound = decision_distance + h`, merging equal `(s, d)` pairs, so
//! the result is a DAG. Unsafe states are kept as sinks.

use std::fmt::Write as _;
use std::hash::BuildHasher;

use hashbrown::HashTable;
use rustc_hash::FxBuildHasher;
use thiserror::Error;

use crate::arena::{Arena, LocId, TaskId};
use crate::behavior::AdversaryBehavior;
use crate::mdp::{
    adversary_choices, move_in_place, enabled_actions, is_decision_state, Action, GlobalState,
    MdpError, Payload, TaskQueue,
};

pub type NodeId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum SubMdpError {
    #[error("horizon must be at least 1")]
    HorizonZero,
    #[error("root is not the immediate successor of an avatar decision")]
    NotPostDecisionState,
    #[error("no first decision state is reachable")]
    NoFirstDecisionState,
    #[error("task {0:?} is not available at the first decision states")]
    TaskNotAvailable(TaskId),
    #[error("decision state reached at distance {distance} before the next decision at {expected}")]
    EarlyDecisionState { distance: u32, expected: u32 },
    #[error("state at distance {0} below the bound has no enabled action")]
    Deadlock(u32),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Avatar chooses a task (non-deterministic).
    AvatarDecision,
    /// Adversary draws a task (probabilistic).
    AdversaryDecision,
    /// Deterministic activities, contracted up to the next decision, unsafe, terminal
    /// or bound state.
    Move,
    /// Satisfies the unsafe predicate; absorbing.
    Unsafe,
    /// Safe and either at the bound or terminal; no successors.
    Frontier,
}

/// One enabled action of a node and the range of its outcomes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Choice {
    pub action: Action,
    start: u32,
    end: u32,
}

#[derive(Clone)]
pub struct SubMdp<P> {
    states: Vec<GlobalState<P>>,
    distance: Vec<u32>,
    kind: Vec<NodeKind>,
    choice_start: Vec<u32>,
    choices: Vec<Choice>,
    outcomes: Vec<(f64, NodeId)>,
    topo: Vec<NodeId>,
    first_decision: Vec<NodeId>,
    unsafe_nodes: Vec<NodeId>,
    index: HashTable<NodeId>,
    decision_distance: u32,
    horizon: u32,
    next_decision_location: LocId,
}

/// Rounds until the avatar's next decision state, as measured by the distance counter.
pub fn rounds_to_decision<P: Payload>(arena: &Arena, s: &GlobalState<P>) -> u32 {
    if is_decision_state(s) {
        0
    } else {
        s.queues[0].remaining(arena) as u32 + u32::from(s.turn > 0)
    }
}

fn is_post_decision<P: Payload>(arena: &Arena, s: &GlobalState<P>) -> bool {
    let q = s.queues[0];
    s.turn == 0
        && q.progress() == 0
        && q
            .task()
            .is_some_and(|t| arena.task(t).start() == s.positions[0])
}

/// Builds the sub-MDP for the decision following the avatar's chosen task.
///
/// `root` must be a post-decision state: avatar to move with its full task queued.
pub fn build_submdp<P, F>(
    arena: &Arena,
    behaviors: &[AdversaryBehavior],
    root: &GlobalState<P>,
    horizon: u32,
    unsafe_predicate: F,
) -> Result<SubMdp<P>, SubMdpError>
where
    P: Payload,
    F: Fn(&GlobalState<P>) -> bool,
{
    if horizon == 0 {
        return Err(SubMdpError::HorizonZero);
    }
    root.validate(arena)?;
    if !is_post_decision(arena, root) {
        return Err(SubMdpError::NotPostDecisionState);
    }
    build_from(arena, behaviors, root, horizon, unsafe_predicate)
}

/// Builds a sub-MDP from any valid state, bounded `h` rounds past the avatar's next
/// decision. A decision state is its own first decision state; a mid-task state
/// covers the same window as the sub-MDP it was observed in.
pub fn build_from<P, F>(
    arena: &Arena,
    behaviors: &[AdversaryBehavior],
    root: &GlobalState<P>,
    horizon: u32,
    unsafe_predicate: F,
) -> Result<SubMdp<P>, SubMdpError>
where
    P: Payload,
    F: Fn(&GlobalState<P>) -> bool,
{
    if horizon == 0 {
        return Err(SubMdpError::HorizonZero);
    }
    root.validate(arena)?;
    let decision_distance = rounds_to_decision(arena, root);
    let next_decision_location = match root.queues[0].task() {
        Some(t) => arena.task(t).end(),
        None => root.positions[0],
    };
    let mut m = SubMdp {
        states: Vec::new(),
        distance: Vec::new(),
        kind: Vec::new(),
        choice_start: vec![0],
        choices: Vec::new(),
        outcomes: Vec::new(),
        topo: Vec::new(),
        first_decision: Vec::new(),
        unsafe_nodes: Vec::new(),
        index: HashTable::new(),
        decision_distance,
        horizon,
        next_decision_location,
    };
    let bound = m.bound();
    m.intern(root.clone(), 0);

    // Nodes are expanded in creation order, so the choice table stays aligned.
    let mut next = 0usize;
    while next < m.states.len() {
        let id = next as NodeId;
        next += 1;
        let d = m.distance[id as usize];
        let state = &m.states[id as usize];
        if unsafe_predicate(state) {
            m.kind.push(NodeKind::Unsafe);
            m.unsafe_nodes.push(id);
            m.choice_start.push(m.choices.len() as u32);
            continue;
        }
        if state.payload.is_terminal() {
            m.kind.push(NodeKind::Frontier);
            m.choice_start.push(m.choices.len() as u32);
            continue;
        }
        if is_decision_state(state) {
            if d < decision_distance {
                return Err(SubMdpError::EarlyDecisionState {
                    distance: d,
                    expected: decision_distance,
                });
            }
            if d == decision_distance {
                m.first_decision.push(id);
            }
        }
        if d >= bound {
            m.kind.push(NodeKind::Frontier);
            m.choice_start.push(m.choices.len() as u32);
            continue;
        }
        let actions = enabled_actions(arena, state);
        let Some(&first) = actions.first() else {
            return Err(SubMdpError::Deadlock(d));
        };
        let kind = match first {
            Action::DecideTask(_) => NodeKind::AvatarDecision,
            Action::AdvDecide => NodeKind::AdversaryDecision,
            Action::Move => NodeKind::Move,
        };
        m.kind.push(kind);
        let mut pending: Vec<(Action, Vec<(f64, GlobalState<P>, u32)>)> = Vec::with_capacity(actions.len());
        {
            let state = &m.states[id as usize];
            for a in actions {
                let outs = match a {
                    Action::DecideTask(t) => {
                        let mut s = state.clone();
                        s.queues[0] = TaskQueue::full(t);
                        vec![(1.0, s, d)]
                    }
                    Action::AdvDecide => adversary_choices(arena, behaviors, state, state.turn)?
                        .into_iter()
                        .map(|(p, t)| {
                            let mut s = state.clone();
                            s.queues[state.turn] = TaskQueue::full(t);
                            (p, s, d)
                        })
                        .collect(),
                    Action::Move => {
                        let (s2, d2) = follow_moves(arena, state, d, bound, &unsafe_predicate)?;
                        vec![(1.0, s2, d2)]
                    }
                };
                pending.push((a, outs));
            }
        }
        for (action, outs) in pending {
            let start = m.outcomes.len() as u32;
            for (p, s, d2) in outs {
                let target = m.intern(s, d2);
                m.outcomes.push((p, target));
            }
            m.choices.push(Choice {
                action,
                start,
                end: m.outcomes.len() as u32,
            });
        }
        m.choice_start.push(m.choices.len() as u32);
    }
    m.topo = m.topological_order();
    Ok(m)
}

/// Applies moves from `s` until the state is a decision, unsafe, terminal or at the bound.
fn follow_moves<P, F>(
    arena: &Arena,
    s: &GlobalState<P>,
    mut d: u32,
    bound: u32,
    unsafe_predicate: &F,
) -> Result<(GlobalState<P>, u32), SubMdpError>
where
    P: Payload,
    F: Fn(&GlobalState<P>) -> bool,
{
    let last = s.last_agent();
    let mut cur = s.clone();
    loop {
        if cur.turn == last {
            d += 1;
        }
        move_in_place(arena, &mut cur)?;
        if d >= bound
            || cur.queues[cur.turn].is_empty()
            || cur.payload.is_terminal()
            || unsafe_predicate(&cur)
        {
            return Ok((cur, d));
        }
    }
}

impl<P> std::fmt::Debug for SubMdp<P> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubMdp")
            .field("states", &self.states.len())
            .field("transitions", &self.outcomes.len())
            .field("decision_distance", &self.decision_distance)
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl<P: Payload> SubMdp<P> {
    fn hash_key(&self, s: &GlobalState<P>, d: u32) -> u64 {
        FxBuildHasher.hash_one((s, d))
    }

    fn intern(&mut self, s: GlobalState<P>, d: u32) -> NodeId {
        let hash = self.hash_key(&s, d);
        let states = &self.states;
        let distance = &self.distance;
        if let Some(&id) = self.index.find(hash, |&id| {
            distance[id as usize] == d && states[id as usize] == s
        }) {
            return id;
        }
        let id = self.states.len() as NodeId;
        self.states.push(s);
        self.distance.push(d);
        let (states, distance) = (&self.states, &self.distance);
        self.index.insert_unique(hash, id, |&x| {
            FxBuildHasher.hash_one((&states[x as usize], distance[x as usize]))
        });
        id
    }

    /// Node of `(s, d)`, if present.
    pub fn find(&self, s: &GlobalState<P>, d: u32) -> Option<NodeId> {
        let hash = self.hash_key(s, d);
        self.index
            .find(hash, |&id| {
                self.distance[id as usize] == d && self.states[id as usize] == *s
            })
            .copied()
    }

    fn topological_order(&self) -> Vec<NodeId> {
        let n = self.states.len();
        let mut indegree = vec![0u32; n];
        for &(_, t) in &self.outcomes {
            indegree[t as usize] += 1;
        }
        let mut order: Vec<NodeId> = (0..n as NodeId).filter(|&v| indegree[v as usize] == 0).collect();
        let mut i = 0;
        while i < order.len() {
            let v = order[i];
            i += 1;
            for c in self.choices_of(v) {
                for &(_, t) in &self.outcomes[c.start as usize..c.end as usize] {
                    indegree[t as usize] -= 1;
                    if indegree[t as usize] == 0 {
                        order.push(t);
                    }
                }
            }
        }
        assert_eq!(order.len(), n, "sub-MDP transition graph has a cycle");
        order
    }
}

impl<P> SubMdp<P> {
    pub fn root(&self) -> NodeId {
        0
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.outcomes.len()
    }

    /// `decision_distance + h`.
    pub fn bound(&self) -> u32 {
        self.decision_distance + self.horizon
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    /// Distance of the first decision states (`|t|` for a post-decision root).
    pub fn decision_distance(&self) -> u32 {
        self.decision_distance
    }

    /// Decision location the avatar is heading to.
    pub fn next_decision_location(&self) -> LocId {
        self.next_decision_location
    }

    pub fn state(&self, v: NodeId) -> &GlobalState<P> {
        &self.states[v as usize]
    }

    pub fn distance(&self, v: NodeId) -> u32 {
        self.distance[v as usize]
    }

    pub fn kind(&self, v: NodeId) -> NodeKind {
        self.kind[v as usize]
    }

    pub fn choices_of(&self, v: NodeId) -> &[Choice] {
        let (a, b) = (self.choice_start[v as usize], self.choice_start[v as usize + 1]);
        &self.choices[a as usize..b as usize]
    }

    pub fn outcomes(&self, c: &Choice) -> &[(f64, NodeId)] {
        &self.outcomes[c.start as usize..c.end as usize]
    }

    /// Nodes in topological order (every edge points forward).
    pub fn topological(&self) -> &[NodeId] {
        &self.topo
    }

    /// Expanded (non-unsafe) avatar decision states at the decision distance.
    pub fn first_decision_states(&self) -> &[NodeId] {
        &self.first_decision
    }

    pub fn unsafe_states(&self) -> &[NodeId] {
        &self.unsafe_nodes
    }

    pub fn is_first_decision(&self, v: NodeId) -> bool {
        self.distance[v as usize] == self.decision_distance
            && self.kind[v as usize] == NodeKind::AvatarDecision
    }

    /// Union of the avatar tasks enabled at the first decision states, in first-seen order.
    pub fn tasks_of_first_decision(&self) -> Result<Vec<TaskId>, SubMdpError> {
        if self.first_decision.is_empty() {
            return Err(SubMdpError::NoFirstDecisionState);
        }
        let mut tasks = Vec::new();
        for &v in &self.first_decision {
            for c in self.choices_of(v) {
                if let Action::DecideTask(t) = c.action {
                    if !tasks.contains(&t) {
                        tasks.push(t);
                    }
                }
            }
        }
        Ok(tasks)
    }

    /// View in which every first decision state only offers `t`.
    pub fn restrict_first_decision(&self, t: TaskId) -> Result<SubMdpView<'_, P>, SubMdpError> {
        if !self.tasks_of_first_decision()?.contains(&t) {
            return Err(SubMdpError::TaskNotAvailable(t));
        }
        Ok(SubMdpView {
            mdp: self,
            restriction: Some(t),
        })
    }

    pub fn view(&self) -> SubMdpView<'_, P> {
        SubMdpView {
            mdp: self,
            restriction: None,
        }
    }

    /// Graphviz rendering: nodes labelled with distance and kind, edges with probabilities.
    pub fn to_dot(&self, arena: &Arena) -> String {
        let mut out = String::from("digraph submdp {\n  rankdir=LR;\n");
        for v in 0..self.states.len() as NodeId {
            let s = &self.states[v as usize];
            let pos: Vec<String> = s
                .positions
                .iter()
                .map(|&p| match arena.coord(p) {
                    Some((x, y)) => format!("({x},{y})"),
                    None => arena.name(p).to_string(),
                })
                .collect();
            let shape = match self.kind[v as usize] {
                NodeKind::Unsafe => ", color=red",
                NodeKind::Frontier => ", style=dashed",
                NodeKind::AvatarDecision => ", shape=box",
                _ => "",
            };
            let _ = writeln!(
                out,
                "  n{v} [label=\"d={} t={} {}\"{shape}];",
                self.distance[v as usize],
                s.turn,
                pos.join(" ")
            );
        }
        for v in 0..self.states.len() as NodeId {
            for c in self.choices_of(v) {
                let label = match c.action {
                    Action::DecideTask(t) => format!("task {}", t.0),
                    Action::AdvDecide => "adv".to_string(),
                    Action::Move => "e".to_string(),
                };
                for &(p, w) in self.outcomes(c) {
                    let _ = writeln!(out, "  n{v} -> n{w} [label=\"{label} {p:.3}\"];");
                }
            }
        }
        out.push_str("}\n");
        out
    }
}

/// A sub-MDP with an optional fixed task at the first decision states.
#[derive(Debug, Clone, Copy)]
pub struct SubMdpView<'a, P> {
    pub mdp: &'a SubMdp<P>,
    pub restriction: Option<TaskId>,
}

impl<'a, P> SubMdpView<'a, P> {
    /// Enabled choices of `v` under the restriction. A first decision state that does
    /// not offer the restricted task keeps its own choices.
    pub fn choices(&self, v: NodeId) -> impl Iterator<Item = &'a Choice> + 'a {
        let all = self.mdp.choices_of(v);
        let keep = match self.restriction {
            Some(t)
                if self.mdp.is_first_decision(v)
                    && all.iter().any(|c| c.action == Action::DecideTask(t)) =>
            {
                Some(Action::DecideTask(t))
            }
            _ => None,
        };
        all.iter().filter(move |c| keep.is_none_or(|a| c.action == a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::{gridworld_from_ascii, EXAMPLE_MAZE};
    use crate::behavior::uniform_behavior;

    fn collision(s: &GlobalState<()>) -> bool {
        s.positions[1..].contains(&s.positions[0])
    }

    #[test]
    fn horizon_zero_and_non_post_decision() {
        let a = gridworld_from_ascii("...").unwrap();
        let v = a.at(1, 1).unwrap();
        let s = GlobalState::new(vec![v], ());
        assert_eq!(
            build_submdp(&a, &[], &s, 1, |_| false).unwrap_err(),
            SubMdpError::NotPostDecisionState
        );
        let t = a.tasks_at(v).unwrap()[0];
        let st = s.with_task(0, t);
        assert_eq!(
            build_submdp(&a, &[], &st, 0, |_| false).unwrap_err(),
            SubMdpError::HorizonZero
        );
    }

    #[test]
    fn single_agent_first_decision_is_unique() {
        let a = gridworld_from_ascii("...").unwrap();
        let v = a.at(1, 1).unwrap();
        let t = a.tasks_at(v).unwrap()[0];
        let st = GlobalState::new(vec![v], ()).with_task(0, t);
        let m = build_submdp(&a, &[], &st, 2, |_| false).unwrap();
        assert_eq!(m.bound(), 4);
        assert_eq!(m.first_decision_states().len(), 1);
        let fd = m.first_decision_states()[0];
        assert_eq!(m.distance(fd), 2);
        assert_eq!(m.tasks_of_first_decision().unwrap().len(), 1);
        // Chain of four moves with a decision at distance 2 and 4: 2 + 1 + 2 + 1 + ... nodes.
        for v in m.topological() {
            let d = m.distance(*v);
            assert!(d <= m.bound());
            if m.kind(*v) == NodeKind::Frontier {
                assert_eq!(d, m.bound());
                assert!(m.choices_of(*v).is_empty());
            }
        }
    }

    #[test]
    fn first_decision_tasks_in_example_maze() {
        let a = gridworld_from_ascii(EXAMPLE_MAZE).unwrap();
        let start = a.at(1, 1).unwrap();
        let t = a
            .tasks_at(start)
            .unwrap()
            .iter()
            .copied()
            .find(|&t| a.task(t).end() == a.at(1, 3).unwrap())
            .unwrap();
        let st = GlobalState::new(vec![start, a.at(5, 5).unwrap()], ()).with_task(0, t);
        let b = vec![uniform_behavior(&a)];
        let m = build_submdp(&a, &b, &st, 2, collision).unwrap();
        let mut got = m.tasks_of_first_decision().unwrap();
        let mut want = a.tasks_at(a.at(1, 3).unwrap()).unwrap().to_vec();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        let view = m.restrict_first_decision(want[0]).unwrap();
        for &fd in m.first_decision_states() {
            assert_eq!(view.choices(fd).count(), 1);
        }
        let bogus = a.tasks_at(start).unwrap()[0];
        assert_eq!(
            m.restrict_first_decision(bogus).unwrap_err(),
            SubMdpError::TaskNotAvailable(bogus)
        );
        let dot = m.to_dot(&a);
        assert!(dot.starts_with("digraph"));
    }

    #[test]
    fn unsafe_nodes_are_sinks() {
        let a = gridworld_from_ascii("...").unwrap();
        let l = a.at(1, 1).unwrap();
        let r = a.at(3, 1).unwrap();
        let t = a.tasks_at(l).unwrap()[0];
        let st = GlobalState::new(vec![l, r], ()).with_task(0, t);
        let b = vec![uniform_behavior(&a)];
        let m = build_submdp(&a, &b, &st, 1, collision).unwrap();
        assert!(!m.unsafe_states().is_empty());
        for &u in m.unsafe_states() {
            assert!(m.choices_of(u).is_empty());
        }
    }

    #[test]
    fn observed_states_share_the_decision_window() {
        let a = gridworld_from_ascii(EXAMPLE_MAZE).unwrap();
        let start = a.at(1, 3).unwrap();
        let t = a.tasks_at(start).unwrap()[0];
        let st = GlobalState::new(vec![start, a.at(5, 5).unwrap()], ()).with_task(0, t);
        let b = vec![uniform_behavior(&a)];
        let m = build_submdp(&a, &b, &st, 2, collision).unwrap();
        for v in 0..m.len() as NodeId {
            let s = m.state(v);
            if m.distance(v) < m.decision_distance() {
                assert_eq!(m.distance(v) + rounds_to_decision(&a, s), m.decision_distance());
            }
        }
    }
}
