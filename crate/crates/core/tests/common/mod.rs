//! Test support: random small gridworld instances and a brute-force reachability oracle
//! that re-implements the turn semantics without the sub-MDP builder.

#![allow(dead_code)]

use std::collections::HashMap;

use online_shield::arena::{gridworld_from_ascii, Arena, LocId, TaskId};
use online_shield::behavior::{weighted_behavior, AdversaryBehavior};
use online_shield::mdp::GlobalState;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub map: String,
    pub arena: Arena,
    pub behaviors: Vec<AdversaryBehavior>,
    pub root: GlobalState<()>,
    pub horizon: u32,
}

pub fn collision(s: &GlobalState<()>) -> bool {
    s.positions[1..].contains(&s.positions[0])
}

fn random_map(rng: &mut ChaCha8Rng) -> String {
    let w = rng.random_range(2..=5);
    let h = rng.random_range(2..=5);
    let wall_p = rng.random_range(0.1..0.45);
    let mut out = String::new();
    for _ in 0..h {
        for _ in 0..w {
            out.push(if rng.random_bool(wall_p) { '#' } else { '.' });
        }
        out.push('\n');
    }
    out
}

/// Random instance with at most `max_adversaries` adversaries and horizon in `1..=max_h`.
/// Maps have at most 25 corridor tiles.
pub fn random_instance(seed: u64, max_adversaries: usize, max_h: u32) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let map = random_map(&mut rng);
        let Ok(arena) = gridworld_from_ascii(&map) else { continue };
        let dls = arena.decision_locations().to_vec();
        if dls.len() < 2 {
            continue;
        }
        let m = rng.random_range(0..=max_adversaries);
        let mut behaviors = Vec::with_capacity(m);
        for _ in 0..m {
            let mut weights = HashMap::new();
            for &v in &dls {
                let n = arena.tasks_at(v).unwrap().len();
                let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
                if w.iter().all(|&x| x == 0.0) {
                    let i = rng.random_range(0..n);
                    w[i] = 1.0;
                }
                weights.insert(v, w);
            }
            behaviors.push(weighted_behavior(&arena, &weights).unwrap());
        }
        let avatar = *dls.choose(&mut rng).unwrap();
        let mut positions = vec![avatar];
        for _ in 0..m {
            positions.push(*dls.choose(&mut rng).unwrap());
        }
        let mut root = GlobalState::new(positions, ());
        let t = *arena.tasks_at(avatar).unwrap().choose(&mut rng).unwrap();
        root.queues[0] = online_shield::mdp::TaskQueue::full(t);
        // Adversaries may already be mid-task.
        for i in 1..=m {
            if rng.random_bool(0.5) {
                let v = root.positions[i];
                let at = *arena.tasks_at(v).unwrap().choose(&mut rng).unwrap();
                root.queues[i] = online_shield::mdp::TaskQueue::full(at);
            }
        }
        let horizon = rng.random_range(1..=max_h);
        return Instance {
            map,
            arena,
            behaviors,
            root,
            horizon,
        };
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct Node {
    pos: Vec<LocId>,
    queue: Vec<Vec<LocId>>,
    turn: usize,
    d: u32,
}

/// Exhaustive recursion over avatar choices (minimised) and adversary outcomes
/// (expected), with the avatar forced to `forced` at its first decision.
pub struct Oracle<'a> {
    arena: &'a Arena,
    behaviors: &'a [AdversaryBehavior],
    bound: u32,
    first_decision: u32,
    forced: Option<TaskId>,
    memo: HashMap<Node, f64>,
    pub calls: usize,
}

impl<'a> Oracle<'a> {
    pub fn new(
        arena: &'a Arena,
        behaviors: &'a [AdversaryBehavior],
        first_decision: u32,
        horizon: u32,
        forced: Option<TaskId>,
    ) -> Self {
        Self {
            arena,
            behaviors,
            bound: first_decision + horizon,
            first_decision,
            forced,
            memo: HashMap::new(),
            calls: 0,
        }
    }

    fn queue_of(&self, s: &GlobalState<()>, i: usize) -> Vec<LocId> {
        match s.queues[i].task() {
            None => Vec::new(),
            Some(t) => self.arena.task(t).path()[1 + s.queues[i].progress()..].to_vec(),
        }
    }

    pub fn value_of(&mut self, s: &GlobalState<()>) -> f64 {
        let node = Node {
            pos: s.positions.to_vec(),
            queue: (0..s.positions.len()).map(|i| self.queue_of(s, i)).collect(),
            turn: s.turn,
            d: 0,
        };
        self.value(node)
    }

    fn value(&mut self, n: Node) -> f64 {
        if let Some(&v) = self.memo.get(&n) {
            return v;
        }
        self.calls += 1;
        let v = self.compute(&n);
        self.memo.insert(n, v);
        v
    }

    fn compute(&mut self, n: &Node) -> f64 {
        if n.pos[1..].contains(&n.pos[0]) {
            return 1.0;
        }
        if n.d >= self.bound {
            return 0.0;
        }
        let i = n.turn;
        let last = n.pos.len() - 1;
        if n.queue[i].is_empty() {
            let here = n.pos[i];
            if i == 0 {
                assert!(n.d >= self.first_decision, "avatar decision before its task ended");
                let tasks: Vec<TaskId> = match self.forced {
                    Some(t) if n.d == self.first_decision => vec![t],
                    _ => self.arena.tasks_at(here).unwrap().to_vec(),
                };
                let mut best = f64::INFINITY;
                for t in tasks {
                    let mut next = n.clone();
                    next.queue[0] = self.arena.task(t).path()[1..].to_vec();
                    best = best.min(self.value(next));
                }
                best
            } else {
                let dist: Vec<(TaskId, f64)> = self.behaviors[i - 1].distribution(here).to_vec();
                let mut total = 0.0;
                for (t, p) in dist {
                    if p > 0.0 {
                        let mut next = n.clone();
                        next.queue[i] = self.arena.task(t).path()[1..].to_vec();
                        total += p * self.value(next);
                    }
                }
                total
            }
        } else {
            let mut next = n.clone();
            next.pos[i] = next.queue[i].remove(0);
            next.turn = (i + 1) % n.pos.len();
            if i == last {
                next.d += 1;
            }
            self.value(next)
        }
    }
}

/// Oracle task-valuation for a post-decision root.
pub fn oracle_valuation(inst: &Instance) -> Vec<(TaskId, f64)> {
    let arena = &inst.arena;
    let t = inst.root.queues[0].task().unwrap();
    let first = arena.task(t).len() as u32;
    let next = arena.task(t).end();
    arena
        .tasks_at(next)
        .unwrap()
        .iter()
        .map(|&task| {
            let mut o = Oracle::new(arena, &inst.behaviors, first, inst.horizon, Some(task));
            (task, o.value_of(&inst.root))
        })
        .collect()
}

/// Structural invariants of the sub-MDP of `inst`; the error names the first violation.
pub fn check_structure(inst: &Instance) -> Result<(), String> {
    use online_shield::submdp::{build_submdp, NodeKind};
    let m = build_submdp(&inst.arena, &inst.behaviors, &inst.root, inst.horizon, collision)
        .map_err(|e| e.to_string())?;
    let order = m.topological();
    if order.len() != m.len() {
        return Err("topological order misses nodes".into());
    }
    let mut rank = vec![usize::MAX; m.len()];
    for (i, &v) in order.iter().enumerate() {
        rank[v as usize] = i;
    }
    let dd = m.decision_distance();
    if dd as usize != inst.arena.task(inst.root.queues[0].task().unwrap()).len() {
        return Err(format!("decision distance {dd}"));
    }
    for v in 0..m.len() as u32 {
        let kind = m.kind(v);
        if kind == NodeKind::AvatarDecision && m.distance(v) < dd {
            return Err(format!("decision node {v} at d={} < {dd}", m.distance(v)));
        }
        if matches!(kind, NodeKind::Frontier | NodeKind::Unsafe) && !m.choices_of(v).is_empty() {
            return Err(format!("sink {v} has successors"));
        }
        if kind == NodeKind::Frontier && m.distance(v) != m.bound() {
            return Err(format!("frontier {v} at d={}", m.distance(v)));
        }
        for c in m.choices_of(v) {
            let outs = m.outcomes(c);
            let total: f64 = outs.iter().map(|&(p, _)| p).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(format!("node {v}: probabilities sum to {total}"));
            }
            for &(p, w) in outs {
                if p <= 0.0 || rank[v as usize] >= rank[w as usize] || m.distance(w) < m.distance(v) {
                    return Err(format!("edge {v} -> {w} breaks the order"));
                }
            }
        }
    }
    for &v in m.first_decision_states() {
        if m.distance(v) != dd {
            return Err(format!("first decision state {v} at d={}", m.distance(v)));
        }
    }
    Ok(())
}

/// Walks the model of instance `seed` from its root along random outcomes and stops
/// right after an adversary decision preceding the avatar's next decision. Returns
/// `None` when no such resolution was met, otherwise whether the reused shield agrees
/// with a fresh computation and the oracle, and zero values stayed zero.
pub fn check_resolution(seed: u64) -> Option<Result<(), String>> {
    use online_shield::mdp::Action;
    use online_shield::shield::{update_shield, ShieldModel};
    let inst = random_instance(seed, 2, 3);
    if inst.behaviors.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ShieldModel::solve(&inst.arena, &inst.behaviors, &inst.root, inst.horizon, collision).ok()?;
    let m = model.submdp();
    let before = model.valuation();
    let mut v = m.root();
    let mut observed = None;
    while m.distance(v) < m.decision_distance() {
        let cs = m.choices_of(v);
        if cs.is_empty() {
            break;
        }
        let c = &cs[0];
        let outs = m.outcomes(c);
        let (_, w) = outs[rng.random_range(0..outs.len())];
        if c.action == Action::AdvDecide && rng.random_bool(0.5) {
            observed = Some(w);
            break;
        }
        v = w;
    }
    let w = observed?;
    let state = m.state(w).clone();
    Some((|| {
        let fresh = ShieldModel::solve(&inst.arena, &inst.behaviors, &state, inst.horizon, collision)
            .map_err(|e| e.to_string())?;
        for delta in [0.0, 0.3, 0.7, 1.0] {
            let up = update_shield(&inst.arena, &inst.behaviors, &state, inst.horizon, delta, collision, Some(&model))
                .map_err(|e| e.to_string())?;
            if !up.reused {
                return Err(format!("seed {seed}: observed state not found in the model"));
            }
            let (uv, fv) = (up.model.valuation(), fresh.valuation());
            if uv.values.len() != fv.values.len() {
                return Err(format!("seed {seed}: task sets differ"));
            }
            for (&(t1, a), &(t2, b)) in uv.values.iter().zip(&fv.values) {
                if t1 != t2 || (a - b).abs() > 1e-9 {
                    return Err(format!("seed {seed}: {a} vs {b}"));
                }
            }
            let want = fresh.shield(delta).map_err(|e| e.to_string())?.allowed;
            if up.shield.allowed != want {
                return Err(format!("seed {seed} delta {delta}: allowed sets differ"));
            }
            for &(t, v0) in &before.values {
                if v0 == 0.0 && up.shield.valuation.value(t) != Some(0.0) {
                    return Err(format!("seed {seed}: task {t:?} lost its zero value"));
                }
            }
        }
        let to_go = m.decision_distance() - m.distance(w);
        for &(t, _) in &before.values {
            let mut o = Oracle::new(&inst.arena, &inst.behaviors, to_go, inst.horizon, Some(t));
            let want = o.value_of(&state);
            let got = fresh.valuation().value(t).unwrap_or(f64::NAN);
            if (got - want).abs() > 1e-9 {
                return Err(format!("seed {seed}: oracle {want} vs {got}"));
            }
        }
        Ok(())
    })())
}

/// Compares the valuation of instance `seed` with the oracle. Returns the number of
/// values strictly between 0 and 1.
pub fn check_oracle(seed: u64) -> Result<usize, String> {
    use online_shield::shield::ShieldModel;
    let inst = random_instance(seed, 2, 3);
    let got = ShieldModel::solve(&inst.arena, &inst.behaviors, &inst.root, inst.horizon, collision)
        .map_err(|e| e.to_string())?
        .valuation();
    let want = oracle_valuation(&inst);
    if got.values.len() != want.len() {
        return Err(format!("seed {seed}: {} tasks vs {}", got.values.len(), want.len()));
    }
    let mut informative = 0;
    for (&(t1, v1), &(t2, v2)) in got.values.iter().zip(&want) {
        if t1 != t2 || (v1 - v2).abs() > 1e-9 {
            return Err(format!("seed {seed} task {t1:?}: {v1} vs {v2}\n{}", inst.map));
        }
        if v2 > 0.0 && v2 < 1.0 {
            informative += 1;
        }
    }
    Ok(informative)
}
