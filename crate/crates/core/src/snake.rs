//! Two-player Snake on a corridor arena.
//!
//! The avatar (agent 0) and a single adversary snake (agent 1) move one tile per
//! turn along corridors chosen at decision locations. Bodies and apples live in
//! [`SnakePayload`], so the same update rule drives both the game and the
//! shield's sub-MDP expansion.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::arena::{gridworld_from_grid, Arena, ArenaError, GridMap, LocId, Task, TaskId};
use crate::behavior::{weighted_behavior, AdversaryBehavior};
use crate::mdp::{adversary_choices, apply_move, startable_tasks, GlobalState, MdpError, Payload, TaskQueue};

pub const AVATAR: usize = 0;
pub const ADVERSARY: usize = 1;

/// Apple reward and win bonus.
pub const APPLE_REWARD: f64 = 10.0;
pub const WIN_REWARD: f64 = 50.0;

/// 17×17 grid of corridors with mixed lengths (three to five tiles).
pub const SNAKE_MAP: &str = "\
...A.............
.##.###.####.###.
.##.###.####.###.
.##.###.####.###.
.................
.##.###.####.###.
.##.###.####.###.
.................
.##.###.####.###.
.##.###.####.###.
.##.###.####.###.
.................
.##.###.####.###.
.##.###.####.###.
.##.###.####.###.
.##.###.####.###.
............E....
";

/// 13×13 brick pattern used for learning experiments. Every junction has three
/// corridors, so with the no-reversal rule each snake has two options per decision.
pub const SMALL_SNAKE_MAP: &str = "\
....A........
.###.###.###.
.............
##.###.###.##
.............
.###.###.###.
.............
##.###.###.##
.............
.###.###.###.
.............
##.###.###.##
......E......
";

#[derive(Debug, Error)]
pub enum SnakeError {
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("map has no '{0}' spawn marker")]
    MissingSpawn(char),
    #[error("spawn '{0}' is not on a decision location")]
    SpawnNotDecision(char),
    #[error("arena too small: {needed} free corridor tiles needed, {available} available")]
    ArenaTooSmall { needed: usize, available: usize },
    #[error("no room for a body of length {0} at the spawn")]
    NoRoomForBody(usize),
    #[error("game is over")]
    GameOver,
    #[error("the avatar must choose a task first")]
    DecisionPending,
    #[error("task {0:?} is not available")]
    TaskNotAvailable(TaskId),
}

/// Grid map with spawn markers `'A'` (avatar head) and `'E'` (adversary head).
#[derive(Debug, Clone)]
pub struct SnakeMap {
    pub arena: Arc<Arena>,
    pub avatar_spawn: LocId,
    pub adversary_spawn: LocId,
}

impl SnakeMap {
    pub fn parse(text: &str) -> Result<Self, SnakeError> {
        let mut spawns: HashMap<char, (i32, i32)> = HashMap::new();
        let mut plain = String::with_capacity(text.len());
        let mut y = 0;
        for line in text.lines() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            y += 1;
            for (x, ch) in line.chars().enumerate() {
                match ch {
                    'A' | 'E' => {
                        spawns.insert(ch, (x as i32 + 1, y));
                        plain.push('.');
                    }
                    c => plain.push(c),
                }
            }
            plain.push('\n');
        }
        let arena = gridworld_from_grid(&GridMap::parse(&plain)?)?;
        let spawn = |c: char| -> Result<LocId, SnakeError> {
            let (x, y) = *spawns.get(&c).ok_or(SnakeError::MissingSpawn(c))?;
            let v = arena.at(x, y).ok_or(SnakeError::MissingSpawn(c))?;
            if !arena.is_decision(v) {
                return Err(SnakeError::SpawnNotDecision(c));
            }
            Ok(v)
        };
        let avatar_spawn = spawn('A')?;
        let adversary_spawn = spawn('E')?;
        Ok(Self {
            arena: Arc::new(arena),
            avatar_spawn,
            adversary_spawn,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameStatus {
    Running,
    AvatarWon,
    AdversaryWon,
}

impl GameStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            GameStatus::Running => "running",
            GameStatus::AvatarWon => "avatar_won",
            GameStatus::AdversaryWon => "adversary_won",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    /// A snake collected its last apple.
    Apples,
    /// A head ran into the other snake.
    Collision,
    SelfCollision,
    /// The tick limit was reached; counted as a loss for the avatar.
    Timeout,
}

pub type Body = SmallVec<[LocId; 24]>;
pub type Apples = SmallVec<[LocId; 8]>;

/// Bodies (head first) and remaining apples of both snakes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SnakePayload {
    pub bodies: [Body; 2],
    /// Sorted.
    pub apples: [Apples; 2],
    pub outcome: Option<(GameStatus, EndReason)>,
}

impl SnakePayload {
    pub fn head(&self, agent: usize) -> LocId {
        self.bodies[agent][0]
    }

    /// Number of own apples eaten by `agent` between `self` and `after`.
    pub fn eaten(&self, after: &Self, agent: usize) -> usize {
        self.apples[agent].len() - after.apples[agent].len()
    }
}

impl Payload for SnakePayload {
    fn after_move(&mut self, agent: usize, _from: LocId, to: LocId) {
        if self.outcome.is_some() {
            return;
        }
        let other = 1 - agent;
        let ate = self.apples[agent].binary_search(&to);
        let body = &mut self.bodies[agent];
        body.insert(0, to);
        if ate.is_err() {
            body.pop();
        }
        // The avatar loses a head-on collision regardless of who moved.
        let loser = if self.bodies[other].contains(&to) {
            Some((agent, EndReason::Collision))
        } else if self.bodies[agent][1..].contains(&to) {
            Some((agent, EndReason::SelfCollision))
        } else {
            None
        };
        if let Some((loser, reason)) = loser {
            let status = if loser == AVATAR || self.head(AVATAR) == self.head(ADVERSARY) {
                GameStatus::AdversaryWon
            } else {
                GameStatus::AvatarWon
            };
            self.outcome = Some((status, reason));
            return;
        }
        if let Ok(i) = ate {
            self.apples[agent].remove(i);
            if self.apples[agent].is_empty() {
                let status = if agent == AVATAR {
                    GameStatus::AvatarWon
                } else {
                    GameStatus::AdversaryWon
                };
                self.outcome = Some((status, EndReason::Apples));
            }
        }
    }

    /// Snakes cannot turn back into their own neck.
    fn permits(&self, _arena: &Arena, agent: usize, task: &Task) -> bool {
        let body = &self.bodies[agent];
        body.len() < 2 || task.path()[1] != body[1]
    }

    fn is_terminal(&self) -> bool {
        self.outcome.is_some()
    }
}

/// The avatar's head lies on the adversary's body, heads included.
pub fn is_unsafe(s: &GlobalState<SnakePayload>) -> bool {
    let p = &s.payload;
    p.bodies[ADVERSARY].contains(&p.head(AVATAR))
}

/// Reward of the avatar for the transition `before → after`.
pub fn reward(before: &SnakePayload, after: &SnakePayload) -> f64 {
    let mut r = APPLE_REWARD * before.eaten(after, AVATAR) as f64;
    if before.outcome.is_none() && matches!(after.outcome, Some((GameStatus::AvatarWon, _))) {
        r += WIN_REWARD;
    }
    r
}

/// Shortest corridor distance from every location to the nearest apple in `apples`.
pub fn apple_distances(arena: &Arena, apples: &[LocId]) -> Vec<Option<u32>> {
    let mut best = vec![None; arena.num_locations()];
    for &a in apples {
        for (b, d) in best.iter_mut().zip(arena.distances_from(a)) {
            if let Some(d) = d {
                *b = Some(b.map_or(d, |x: u32| x.min(d)));
            }
        }
    }
    best
}

/// Distance to the nearest apple after taking `task`: zero if the corridor passes an
/// apple, otherwise the distance from its endpoint.
pub fn task_apple_distance(arena: &Arena, task: TaskId, apples: &[LocId], dist: &[Option<u32>]) -> Option<u32> {
    let path = arena.task(task).path();
    if path[1..].iter().any(|v| apples.binary_search(v).is_ok()) {
        return Some(0);
    }
    dist[path[path.len() - 1].index()]
}

/// Adversary model: weight 4 on the corridors closest to its nearest own apple, 1 on the rest.
pub fn adversary_behavior(arena: &Arena, apples: &[LocId]) -> AdversaryBehavior {
    let dist = apple_distances(arena, apples);
    let mut weights = HashMap::new();
    for &v in arena.decision_locations() {
        let tasks = arena.tasks_at(v).expect("decision location");
        let ds: Vec<Option<u32>> = tasks
            .iter()
            .map(|&t| task_apple_distance(arena, t, apples, &dist))
            .collect();
        let best = ds.iter().flatten().min().copied();
        let w = ds
            .iter()
            .map(|&d| if d.is_some() && d == best { 4.0 } else { 1.0 })
            .collect();
        weights.insert(v, w);
    }
    weighted_behavior(arena, &weights).expect("positive weights")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnakeConfig {
    pub apples_per_player: usize,
    pub initial_length: usize,
    pub max_ticks: u32,
}

impl Default for SnakeConfig {
    fn default() -> Self {
        Self {
            apples_per_player: 5,
            initial_length: 3,
            max_ticks: 1000,
        }
    }
}

/// What happened during one round.
#[derive(Debug, Clone)]
pub struct RoundEvent {
    pub reward: f64,
    /// State right after the adversary drew a new corridor, if it did.
    pub adversary_decision: Option<GlobalState<SnakePayload>>,
    pub avatar_ate: bool,
    pub adversary_ate: bool,
}

#[derive(Debug, Clone)]
pub struct SnakeGame {
    arena: Arc<Arena>,
    config: SnakeConfig,
    state: GlobalState<SnakePayload>,
    behavior: AdversaryBehavior,
    rng: ChaCha8Rng,
    seed: u64,
    tick: u32,
    scores: [i64; 2],
    timed_out: bool,
}

/// Simple path of `len` tiles starting at `head`, avoiding `blocked`.
fn lay_body(arena: &Arena, head: LocId, len: usize, blocked: &[LocId]) -> Option<Vec<LocId>> {
    fn extend(arena: &Arena, path: &mut Vec<LocId>, len: usize, blocked: &[LocId]) -> bool {
        if path.len() == len {
            return true;
        }
        let last = *path.last().unwrap();
        for &n in arena.successors(last) {
            if path.contains(&n) || blocked.contains(&n) {
                continue;
            }
            path.push(n);
            if extend(arena, path, len, blocked) {
                return true;
            }
            path.pop();
        }
        false
    }
    if blocked.contains(&head) {
        return None;
    }
    let mut path = vec![head];
    extend(arena, &mut path, len.max(1), blocked).then_some(path)
}

pub fn new_game(map: &SnakeMap, seed: u64, config: SnakeConfig) -> Result<SnakeGame, SnakeError> {
    let arena = map.arena.clone();
    let corridor: Vec<LocId> = arena
        .locations()
        .filter(|&v| !arena.successors(v).is_empty())
        .collect();
    let needed = 2 * config.apples_per_player + 2 * config.initial_length.max(1);
    if corridor.len() < needed {
        return Err(SnakeError::ArenaTooSmall {
            needed,
            available: corridor.len(),
        });
    }
    let avatar = lay_body(&arena, map.avatar_spawn, config.initial_length, &[map.adversary_spawn])
        .ok_or(SnakeError::NoRoomForBody(config.initial_length))?;
    let adversary = lay_body(&arena, map.adversary_spawn, config.initial_length, &avatar)
        .ok_or(SnakeError::NoRoomForBody(config.initial_length))?;
    let free: Vec<LocId> = corridor
        .into_iter()
        .filter(|v| !avatar.contains(v) && !adversary.contains(v))
        .collect();
    let k = config.apples_per_player;
    if free.len() < 2 * k {
        return Err(SnakeError::ArenaTooSmall {
            needed,
            available: free.len() + avatar.len() + adversary.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<LocId> = sample(&mut rng, free.len(), 2 * k)
        .into_iter()
        .map(|i| free[i])
        .collect();
    let mut avatar_apples = picked[..k].to_vec();
    let mut adversary_apples = picked[k..].to_vec();
    avatar_apples.sort();
    adversary_apples.sort();
    let behavior = adversary_behavior(&arena, &adversary_apples);
    let payload = SnakePayload {
        bodies: [Body::from_vec(avatar), Body::from_vec(adversary)],
        apples: [Apples::from_vec(avatar_apples), Apples::from_vec(adversary_apples)],
        outcome: None,
    };
    let state = GlobalState::new(vec![map.avatar_spawn, map.adversary_spawn], payload);
    Ok(SnakeGame {
        arena,
        config,
        state,
        behavior,
        rng,
        seed,
        tick: 0,
        scores: [0, 0],
        timed_out: false,
    })
}

impl SnakeGame {
    pub fn arena(&self) -> &Arena {
        &self.arena
    }

    pub fn arena_arc(&self) -> Arc<Arena> {
        self.arena.clone()
    }

    pub fn config(&self) -> &SnakeConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> &GlobalState<SnakePayload> {
        &self.state
    }

    pub fn payload(&self) -> &SnakePayload {
        &self.state.payload
    }

    pub fn behavior(&self) -> &AdversaryBehavior {
        &self.behavior
    }

    pub fn behaviors(&self) -> Vec<AdversaryBehavior> {
        vec![self.behavior.clone()]
    }

    pub fn tick(&self) -> u32 {
        self.tick
    }

    /// Avatar and adversary scores.
    pub fn scores(&self) -> [i64; 2] {
        self.scores
    }

    pub fn status(&self) -> GameStatus {
        match self.state.payload.outcome {
            Some((s, _)) => s,
            None if self.timed_out => GameStatus::AdversaryWon,
            None => GameStatus::Running,
        }
    }

    pub fn end_reason(&self) -> Option<EndReason> {
        match self.state.payload.outcome {
            Some((_, r)) => Some(r),
            None if self.timed_out => Some(EndReason::Timeout),
            None => None,
        }
    }

    pub fn is_running(&self) -> bool {
        self.status() == GameStatus::Running
    }

    /// Whether the avatar lost by running into the adversary.
    pub fn avatar_collided(&self) -> bool {
        self.state.payload.outcome == Some((GameStatus::AdversaryWon, EndReason::Collision))
    }

    /// The avatar has to choose its next corridor.
    pub fn at_decision(&self) -> bool {
        self.is_running() && self.state.turn == AVATAR && self.state.queues[AVATAR].is_empty()
    }

    /// Corridors the avatar may take now (reversal excluded).
    pub fn available_tasks(&self) -> Vec<TaskId> {
        if self.at_decision() {
            startable_tasks(&self.arena, &self.state, AVATAR)
        } else {
            Vec::new()
        }
    }

    pub fn choose(&mut self, task: TaskId) -> Result<(), SnakeError> {
        if !self.is_running() {
            return Err(SnakeError::GameOver);
        }
        if !self.available_tasks().contains(&task) {
            return Err(SnakeError::TaskNotAvailable(task));
        }
        self.state.queues[AVATAR] = TaskQueue::full(task);
        Ok(())
    }

    /// One round: the avatar moves, then the adversary (drawing a corridor first if
    /// it is at a decision location).
    pub fn step(&mut self) -> Result<RoundEvent, SnakeError> {
        if !self.is_running() {
            return Err(SnakeError::GameOver);
        }
        if self.at_decision() {
            return Err(SnakeError::DecisionPending);
        }
        let before = self.state.payload.clone();
        self.state = apply_move(&self.arena, &self.state)?;
        let mut adversary_decision = None;
        if self.state.payload.outcome.is_none() {
            if self.state.queues[ADVERSARY].is_empty() {
                let dist = adversary_choices(
                    &self.arena,
                    std::slice::from_ref(&self.behavior),
                    &self.state,
                    ADVERSARY,
                )?;
                let t = draw(&dist, &mut self.rng);
                self.state.queues[ADVERSARY] = TaskQueue::full(t);
                adversary_decision = Some(self.state.clone());
            }
            self.state = apply_move(&self.arena, &self.state)?;
        } else {
            self.state.turn = AVATAR;
        }
        self.tick += 1;
        let after = &self.state.payload;
        let avatar_ate = before.eaten(after, AVATAR) > 0;
        let adversary_ate = before.eaten(after, ADVERSARY) > 0;
        let r = reward(&before, after);
        self.scores[AVATAR] += r as i64;
        let mut adv = APPLE_REWARD * before.eaten(after, ADVERSARY) as f64;
        if before.outcome.is_none() && matches!(after.outcome, Some((GameStatus::AdversaryWon, _))) {
            adv += WIN_REWARD;
        }
        self.scores[ADVERSARY] += adv as i64;
        if adversary_ate {
            self.behavior = adversary_behavior(&self.arena, &self.state.payload.apples[ADVERSARY]);
        }
        if self.is_running() && self.tick >= self.config.max_ticks {
            self.timed_out = true;
        }
        Ok(RoundEvent {
            reward: r,
            adversary_decision,
            avatar_ate,
            adversary_ate,
        })
    }
}

fn draw<R: Rng + ?Sized>(dist: &[(f64, TaskId)], rng: &mut R) -> TaskId {
    let mut u: f64 = rng.random();
    for &(p, t) in dist {
        if u < p {
            return t;
        }
        u -= p;
    }
    dist.last().expect("non-empty distribution").1
}

/// The game as a shield state: heads, remaining corridor edges, turn and payload.
pub fn to_shield_state(game: &SnakeGame) -> Result<GlobalState<SnakePayload>, SnakeError> {
    if !game.is_running() {
        return Err(SnakeError::GameOver);
    }
    Ok(game.state.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::is_decision_state;
    use crate::shield::ShieldModel;
    use crate::submdp::build_submdp;

    fn small() -> SnakeMap {
        SnakeMap::parse(SMALL_SNAKE_MAP).unwrap()
    }

    fn xy(a: &Arena, v: LocId) -> (i32, i32) {
        a.coord(v).unwrap()
    }

    #[test]
    fn parse_spawns() {
        let m = small();
        assert_eq!(xy(&m.arena, m.avatar_spawn), (5, 1));
        assert_eq!(xy(&m.arena, m.adversary_spawn), (7, 13));
        assert!(matches!(SnakeMap::parse("A..\n"), Err(SnakeError::MissingSpawn('E'))));
        assert!(matches!(
            SnakeMap::parse("A.E.\n"),
            Err(SnakeError::SpawnNotDecision('E'))
        ));
    }

    #[test]
    fn new_game_places_apples() {
        let m = SnakeMap::parse(SNAKE_MAP).unwrap();
        let g = new_game(&m, 42, SnakeConfig::default()).unwrap();
        let p = g.payload();
        assert_eq!(p.apples[0].len(), 5);
        assert_eq!(p.apples[1].len(), 5);
        for a in p.apples.iter().flatten() {
            assert!(!p.bodies[0].contains(a) && !p.bodies[1].contains(a));
            assert!(!p.apples[0].contains(a) || !p.apples[1].contains(a));
        }
        let mut all: Vec<_> = p.apples.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
        for b in &p.bodies {
            assert_eq!(b.len(), 3);
            for w in b.windows(2) {
                assert!(m.arena.has_edge(w[0], w[1]));
            }
        }
        let g2 = new_game(&m, 42, SnakeConfig::default()).unwrap();
        assert_eq!(g.state(), g2.state());
        let g3 = new_game(&m, 43, SnakeConfig::default()).unwrap();
        assert_ne!(g.payload().apples, g3.payload().apples);
    }

    #[test]
    fn tiny_arena_is_too_small() {
        let m = SnakeMap::parse("A.E\n").unwrap();
        assert!(matches!(
            new_game(&m, 1, SnakeConfig::default()),
            Err(SnakeError::ArenaTooSmall { .. })
        ));
    }

    fn payload(a: &Arena, avatar: &[(i32, i32)], adversary: &[(i32, i32)]) -> SnakePayload {
        let ids = |cs: &[(i32, i32)]| cs.iter().map(|&(x, y)| a.at(x, y).unwrap()).collect::<Body>();
        SnakePayload {
            bodies: [ids(avatar), ids(adversary)],
            apples: Default::default(),
            outcome: None,
        }
    }

    fn state(p: SnakePayload) -> GlobalState<SnakePayload> {
        GlobalState::new(vec![p.bodies[0][0], p.bodies[1][0]], p)
    }

    #[test]
    fn unsafe_predicate() {
        let a = gridworld_from_grid(&GridMap::parse(".........\n").unwrap()).unwrap();
        let heads = payload(&a, &[(3, 1), (2, 1)], &[(3, 1), (4, 1)]);
        assert!(is_unsafe(&state(heads)));
        let tail = payload(&a, &[(6, 1), (5, 1)], &[(8, 1), (7, 1), (6, 1)]);
        assert!(is_unsafe(&state(tail)));
        let apart = payload(&a, &[(2, 1), (1, 1)], &[(8, 1), (9, 1)]);
        assert!(!is_unsafe(&state(apart)));
    }

    #[test]
    fn moves_collide_and_grow() {
        let a = gridworld_from_grid(&GridMap::parse(".........\n").unwrap()).unwrap();
        let at = |x| a.at(x, 1).unwrap();
        // Avatar walks into the adversary's tail.
        let mut p = payload(&a, &[(4, 1), (3, 1)], &[(7, 1), (6, 1), (5, 1)]);
        p.after_move(AVATAR, at(4), at(5));
        assert_eq!(p.outcome, Some((GameStatus::AdversaryWon, EndReason::Collision)));
        // Adversary head into the avatar's body: the adversary loses.
        let mut p = payload(&a, &[(4, 1), (3, 1), (2, 1)], &[(5, 1), (6, 1)]);
        p.bodies[0] = smallvec::smallvec![at(3), at(4), at(5)];
        p.bodies[1] = smallvec::smallvec![at(6), at(7)];
        p.after_move(ADVERSARY, at(6), at(5));
        assert_eq!(p.outcome, Some((GameStatus::AvatarWon, EndReason::Collision)));
        // Adversary head onto the avatar's head: the avatar loses.
        let mut p = payload(&a, &[(4, 1), (3, 1)], &[(6, 1), (7, 1)]);
        p.bodies[0] = smallvec::smallvec![at(5), at(4)];
        p.after_move(ADVERSARY, at(6), at(5));
        assert_eq!(p.outcome, Some((GameStatus::AdversaryWon, EndReason::Collision)));
        // Growth by one on an own apple; other colours are ignored.
        let mut p = payload(&a, &[(2, 1), (1, 1)], &[(9, 1), (8, 1)]);
        p.apples = [smallvec::smallvec![at(3), at(6)], smallvec::smallvec![at(4)]];
        let before = p.clone();
        p.after_move(AVATAR, at(2), at(3));
        assert_eq!(p.bodies[0].len(), 3);
        assert_eq!(&p.apples[0][..], &[at(6)]);
        assert_eq!(reward(&before, &p), 10.0);
        let before = p.clone();
        p.after_move(AVATAR, at(3), at(4));
        assert_eq!(&p.bodies[0][..], &[at(4), at(3), at(2)]);
        assert_eq!(&p.apples[1][..], &[at(4)]);
        assert_eq!(reward(&before, &p), 0.0);
        p.after_move(AVATAR, at(4), at(5));
        let before = p.clone();
        p.after_move(AVATAR, at(5), at(6));
        assert_eq!(p.outcome, Some((GameStatus::AvatarWon, EndReason::Apples)));
        assert_eq!(reward(&before, &p), 60.0);
    }

    #[test]
    fn no_reversal() {
        let m = small();
        let g = new_game(&m, 3, SnakeConfig::default()).unwrap();
        let neck = g.payload().bodies[0][1];
        let ts = g.available_tasks();
        assert!(!ts.is_empty());
        for t in ts {
            assert_ne!(m.arena.task(t).path()[1], neck);
        }
    }

    #[test]
    fn shield_state_conversion() {
        let m = small();
        let mut g = new_game(&m, 5, SnakeConfig::default()).unwrap();
        assert!(is_decision_state(&to_shield_state(&g).unwrap()));
        let t = g.available_tasks()[0];
        g.choose(t).unwrap();
        g.step().unwrap();
        let s = to_shield_state(&g).unwrap();
        assert!(!s.queues[0].is_empty());
        let mut g = new_game(&m, 5, SnakeConfig { max_ticks: 1, ..Default::default() }).unwrap();
        g.choose(t).unwrap();
        g.step().unwrap();
        assert_eq!(g.status(), GameStatus::AdversaryWon);
        assert!(matches!(to_shield_state(&g), Err(SnakeError::GameOver)));
    }

    #[test]
    fn adversary_prefers_apple_corridor() {
        let m = small();
        let a = &m.arena;
        let apple = a.at(5, 13).unwrap();
        let b = adversary_behavior(a, &[apple]);
        let v = m.adversary_spawn;
        let n = a.tasks_at(v).unwrap().len() as f64;
        let toward = a
            .tasks_at(v)
            .unwrap()
            .iter()
            .copied()
            .find(|&t| a.task(t).path().contains(&apple))
            .unwrap();
        assert!((b.probability(v, toward) - 4.0 / (n + 3.0)).abs() < 1e-12);
    }

    /// Replaying a game along the sub-MDP reaches the same payloads at the
    /// avatar's decisions.
    #[test]
    fn payload_replay_matches_submdp() {
        let m = small();
        for seed in 0..5 {
            let mut g = new_game(&m, seed, SnakeConfig::default()).unwrap();
            let t = g.available_tasks()[0];
            g.choose(t).unwrap();
            let root = to_shield_state(&g).unwrap();
            let sub = build_submdp(&m.arena, &g.behaviors(), &root, 6, is_unsafe).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut checked = 0;
            for d in 1..=6 {
                g.step().unwrap();
                if !g.is_running() {
                    break;
                }
                if g.at_decision() {
                    assert!(sub.find(g.state(), d).is_some(), "seed {seed} round {d}");
                    checked += 1;
                    let ts = g.available_tasks();
                    g.choose(ts[rng.random_range(0..ts.len())]).unwrap();
                }
            }
            assert!(checked > 0 || !g.is_running(), "seed {seed}");
        }
    }

    #[test]
    fn game_runs_to_completion() {
        let m = small();
        for seed in 0..20 {
            let mut g = new_game(&m, seed, SnakeConfig::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            while g.is_running() {
                if g.at_decision() {
                    let ts = g.available_tasks();
                    g.choose(ts[rng.random_range(0..ts.len())]).unwrap();
                }
                let len0 = g.payload().bodies.clone();
                let ev = g.step().unwrap();
                let p = g.payload();
                if g.is_running() {
                    assert_eq!(p.bodies[0].len(), len0[0].len() + usize::from(ev.avatar_ate));
                    assert_eq!(p.bodies[1].len(), len0[1].len() + usize::from(ev.adversary_ate));
                }
            }
            assert!(g.end_reason().is_some());
        }
    }

    #[test]
    fn snake_shield_solves() {
        let m = small();
        let mut g = new_game(&m, 2, SnakeConfig::default()).unwrap();
        let t = g.available_tasks()[0];
        g.choose(t).unwrap();
        let root = to_shield_state(&g).unwrap();
        let model = ShieldModel::solve(&m.arena, &g.behaviors(), &root, 6, is_unsafe).unwrap();
        let v = model.valuation();
        assert!(!v.values.is_empty());
        assert!(v.values.iter().all(|&(_, x)| (0.0..=1.0).contains(&x)));
    }
}
