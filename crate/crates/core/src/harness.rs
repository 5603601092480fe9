//! Experiment drivers: one-shot checks, timing sweeps, shielded vs unshielded
//! learning, and the plain-grid safety run.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::{Arena, ArenaError, LocId, TaskId};
use crate::behavior::{deterministic_behavior, uniform_behavior, AdversaryBehavior, BehaviorError};
use crate::mdp::{advance_turn, is_decision_state, GlobalState, MdpError, TaskQueue};
use crate::rl::{run_episode, EpisodeResult, LearnerConfig, QFunction, RlError, ShieldDriver};
use crate::shield::{compute_shield, make_shield, OnlineShield, RiskBand, ShieldError, ShieldModel};
use crate::snake::{is_unsafe, new_game, to_shield_state, SnakeConfig, SnakeError, SnakeMap, SnakePayload};
use crate::submdp::{build_from, SubMdpError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    SubMdp(#[from] SubMdpError),
    #[error(transparent)]
    Shield(#[from] ShieldError),
    #[error(transparent)]
    Snake(#[from] SnakeError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Plain collision: the avatar shares a location with an adversary.
pub fn collision(s: &GlobalState<()>) -> bool {
    s.positions[1..].contains(&s.positions[0])
}

/// State file: node ids of the agents and the locations each still has to visit,
/// starting with its current one (empty when idle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDoc {
    pub positions: Vec<String>,
    #[serde(default)]
    pub queues: Vec<Vec<String>>,
    #[serde(default)]
    pub turn: usize,
}

pub fn state_from_doc(arena: &Arena, doc: &StateDoc) -> Result<GlobalState<()>, HarnessError> {
    let find = |name: &str| {
        arena
            .find(name)
            .ok_or_else(|| HarnessError::InvalidState(format!("unknown node id '{name}'")))
    };
    let positions = doc
        .positions
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<LocId>, _>>()?;
    let mut s = GlobalState::new(positions, ());
    s.turn = doc.turn;
    for (i, q) in doc.queues.iter().enumerate() {
        if i >= s.positions.len() {
            return Err(HarnessError::InvalidState("more queues than agents".into()));
        }
        if q.len() < 2 {
            continue;
        }
        let rest = q.iter().map(|n| find(n)).collect::<Result<Vec<LocId>, _>>()?;
        let (task, done) = (0..arena.num_tasks() as u32)
            .map(TaskId)
            .find_map(|t| {
                let p = arena.task(t).path();
                (p.len() >= rest.len() && p[p.len() - rest.len()..] == rest[..])
                    .then(|| (t, p.len() - rest.len()))
            })
            .ok_or_else(|| HarnessError::InvalidState(format!("queue {i} is not the rest of a task")))?;
        s.queues[i] = TaskQueue::partial(task, done, arena);
    }
    s.validate(arena)?;
    Ok(s)
}

pub fn state_to_doc(arena: &Arena, s: &GlobalState<()>) -> StateDoc {
    StateDoc {
        positions: s.positions.iter().map(|&v| arena.name(v).to_string()).collect(),
        queues: s
            .queues
            .iter()
            .map(|q| match q.task() {
                None => Vec::new(),
                Some(t) => arena.task(t).path()[q.progress()..]
                    .iter()
                    .map(|&v| arena.name(v).to_string())
                    .collect(),
            })
            .collect(),
        turn: s.turn,
    }
}

/// Behaviours for `m` adversaries: the given ones by index, uniform elsewhere.
pub fn behaviors_for(arena: &Arena, m: usize, given: &[(usize, AdversaryBehavior)]) -> Result<Vec<AdversaryBehavior>, HarnessError> {
    let mut out = vec![uniform_behavior(arena); m];
    for (agent, b) in given {
        if *agent == 0 || *agent > m {
            return Err(HarnessError::Config(format!("behaviour for agent {agent}, but there are {m} adversaries")));
        }
        b.validate(arena)?;
        out[agent - 1] = b.clone();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckTask {
    pub path: Vec<String>,
    pub value: f64,
    pub band: RiskBand,
}

/// Valuation JSON of the `check` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub tasks: Vec<CheckTask>,
    pub optimal: f64,
    pub allowed: Vec<usize>,
    pub delta: f64,
}

pub fn check(
    arena: &Arena,
    behaviors: &[AdversaryBehavior],
    state: &GlobalState<()>,
    horizon: u32,
    delta: f64,
) -> Result<CheckReport, HarnessError> {
    let (shield, _) = compute_shield(arena, behaviors, state, horizon, delta, collision)?;
    let v = &shield.valuation;
    Ok(CheckReport {
        tasks: v
            .values
            .iter()
            .map(|&(t, value)| CheckTask {
                path: arena.task(t).path().iter().map(|&p| arena.name(p).to_string()).collect(),
                value,
                band: crate::shield::risk_band(value),
            })
            .collect(),
        optimal: v.optimal,
        allowed: v
            .values
            .iter()
            .enumerate()
            .filter(|(_, (t, _))| shield.allows(*t))
            .map(|(i, _)| i)
            .collect(),
        delta,
    })
}

pub fn export_dot(
    arena: &Arena,
    behaviors: &[AdversaryBehavior],
    state: &GlobalState<()>,
    horizon: u32,
) -> Result<String, HarnessError> {
    Ok(build_from(arena, behaviors, state, horizon, collision)?.to_dot(arena))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub map: String,
    pub horizons: Vec<u32>,
    pub lengths: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub h: u32,
    pub l: usize,
    pub mean_s: f64,
    pub max_s: f64,
    pub n: usize,
}

/// Post-decision states met while random snakes of length `length` play, with the
/// adversary model in force at each.
pub fn sample_states(
    map: &SnakeMap,
    length: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<(GlobalState<SnakePayload>, AdversaryBehavior)>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = SnakeConfig {
        initial_length: length,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(samples);
    let mut game_seed = seed;
    while out.len() < samples {
        let mut g = new_game(map, game_seed, config.clone())?;
        game_seed = game_seed.wrapping_add(1);
        while g.is_running() && out.len() < samples {
            if g.at_decision() {
                let ts = g.available_tasks();
                g.choose(ts[rng.random_range(0..ts.len())])?;
                out.push((to_shield_state(&g)?, g.behavior().clone()));
            }
            g.step()?;
        }
    }
    Ok(out)
}

/// Wall-clock time of full shield computations (sub-MDP construction and valuation)
/// for every horizon and snake length. Each length uses one fixed sample of states.
pub fn bench_horizon(config: &BenchConfig) -> Result<Vec<BenchRecord>, HarnessError> {
    let map = SnakeMap::parse(&config.map)?;
    let mut out = Vec::new();
    for &l in &config.lengths {
        let states = sample_states(&map, l, config.samples, config.seed)?;
        for &h in &config.horizons {
            let mut total = 0.0;
            let mut max: f64 = 0.0;
            for (s, b) in &states {
                let started = Instant::now();
                let model = ShieldModel::solve(&map.arena, std::slice::from_ref(b), s, h, is_unsafe)?;
                std::hint::black_box(model.valuation());
                let dt = started.elapsed().as_secs_f64();
                total += dt;
                max = max.max(dt);
            }
            let n = states.len();
            out.push(BenchRecord {
                h,
                l,
                mean_s: if n == 0 { 0.0 } else { total / n as f64 },
                max_s: max,
                n,
            });
        }
    }
    Ok(out)
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from("h,l,mean_s,max_s,n\n");
    for r in records {
        s.push_str(&format!("{},{},{:.6},{:.6},{}\n", r.h, r.l, r.mean_s, r.max_s, r.n));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Shielded,
    Unshielded,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Shielded => "shielded",
            Mode::Unshielded => "unshielded",
        }
    }
}

pub const REWARD_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub episode: usize,
    pub mode: Mode,
    pub mean_reward_50: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub games: usize,
    pub wins: usize,
    pub collisions: usize,
    pub total_reward: f64,
}

impl Stats {
    pub fn add(&mut self, r: &EpisodeResult) {
        self.games += 1;
        self.wins += usize::from(r.won);
        self.collisions += usize::from(r.collision);
        self.total_reward += r.reward;
    }

    pub fn win_rate(&self) -> f64 {
        if self.games == 0 {
            0.0
        } else {
            self.wins as f64 / self.games as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub map: String,
    pub learner: LearnerConfig,
    pub snake: SnakeConfig,
    pub seed: u64,
    pub eval_games: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            map: crate::snake::SMALL_SNAKE_MAP.to_string(),
            learner: LearnerConfig {
                horizon: 12,
                ..LearnerConfig::default()
            },
            snake: SnakeConfig::default(),
            seed: 1,
            eval_games: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub curve: Vec<RewardRecord>,
    pub q: QFunction,
    pub training: Stats,
    pub evaluation: Stats,
}

fn training_game_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(episode as u64)
}

fn evaluation_game_seed(seed: u64, game: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(500_000 + game as u64)
}

fn play(
    config: &TrainConfig,
    map: &SnakeMap,
    game_seed: u64,
    q: &mut QFunction,
    mode: Mode,
    epsilon: f64,
    learn: bool,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeResult, HarnessError> {
    let mut game = new_game(map, game_seed, config.snake.clone())?;
    let mut driver = match mode {
        Mode::Shielded => Some(ShieldDriver::with_budget(
            config.learner.horizon,
            config.learner.delta,
            config.learner.budget_ms,
        )?),
        Mode::Unshielded => None,
    };
    Ok(run_episode(&mut game, q, &config.learner, driver.as_mut(), epsilon, learn, rng)?)
}

/// Q-learning for `learner.episodes` games, then `eval_games` greedy games.
/// Both modes see the same game seeds.
pub fn train(config: &TrainConfig, mode: Mode) -> Result<TrainReport, HarnessError> {
    config.learner.validate()?;
    let map = SnakeMap::parse(&config.map)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut q = QFunction::default();
    let mut training = Stats::default();
    let mut rewards = Vec::with_capacity(config.learner.episodes);
    for e in 0..config.learner.episodes {
        let r = play(config, &map, training_game_seed(config.seed, e), &mut q, mode, config.learner.epsilon, true, &mut rng)?;
        training.add(&r);
        rewards.push(r.reward);
    }
    let curve = rewards
        .chunks(REWARD_WINDOW)
        .enumerate()
        .filter(|(_, w)| w.len() == REWARD_WINDOW)
        .map(|(i, w)| RewardRecord {
            episode: (i + 1) * REWARD_WINDOW,
            mode,
            mean_reward_50: w.iter().sum::<f64>() / w.len() as f64,
        })
        .collect();
    let evaluation = evaluate(config, &map, &q, mode)?;
    Ok(TrainReport {
        mode,
        curve,
        q,
        training,
        evaluation,
    })
}

/// Greedy play without learning.
pub fn evaluate(config: &TrainConfig, map: &SnakeMap, q: &QFunction, mode: Mode) -> Result<Stats, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut q = q.clone();
    let mut stats = Stats::default();
    for i in 0..config.eval_games {
        let r = play(config, map, evaluation_game_seed(config.seed, i), &mut q, mode, 0.0, false, &mut rng)?;
        stats.add(&r);
    }
    Ok(stats)
}

/// Shielded and unshielded training on the same seeds.
pub fn train_compare(config: &TrainConfig) -> Result<(TrainReport, TrainReport), HarnessError> {
    Ok((train(config, Mode::Shielded)?, train(config, Mode::Unshielded)?))
}

pub fn reward_csv(records: &[RewardRecord]) -> String {
    let mut s = String::from("episode,mode,mean_reward_50\n");
    for r in records {
        s.push_str(&format!("{},{},{:.4}\n", r.episode, r.mode.as_str(), r.mean_reward_50));
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub map: String,
    pub snake: SnakeConfig,
    pub episodes: usize,
    pub seed: u64,
    pub horizon: u32,
    pub delta: f64,
    pub shielded: bool,
    #[serde(default)]
    pub budget_ms: u64,
    /// Greedy play with these weights; uniformly random corridors otherwise.
    pub weights: Option<QFunction>,
}

pub fn simulate(config: &SimulateConfig) -> Result<Stats, HarnessError> {
    let map = SnakeMap::parse(&config.map)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let learner = LearnerConfig {
        horizon: config.horizon,
        delta: config.delta,
        budget_ms: config.budget_ms,
        ..Default::default()
    };
    learner.validate()?;
    let (mut q, epsilon) = match &config.weights {
        Some(q) => (q.clone(), 0.0),
        None => (QFunction::default(), 1.0),
    };
    let mut stats = Stats::default();
    for e in 0..config.episodes {
        let mut game = new_game(&map, training_game_seed(config.seed, e), config.snake.clone())?;
        let mut driver = if config.shielded {
            Some(ShieldDriver::with_budget(config.horizon, config.delta, config.budget_ms)?)
        } else {
            None
        };
        let r = run_episode(&mut game, &mut q, &learner, driver.as_mut(), epsilon, false, &mut rng)?;
        stats.add(&r);
    }
    Ok(stats)
}

/// 7×7 arena with many short cycles.
pub const SAFETY_MAP: &str = "\
.......
.#.#.#.
.......
.#.#.#.
.......
.#.#.#.
.......
";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafetyConfig {
    pub map: String,
    pub episodes: usize,
    pub rounds: usize,
    pub horizon: u32,
    pub delta: f64,
    pub shielded: bool,
    pub seed: u64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            map: SAFETY_MAP.to_string(),
            episodes: 1000,
            rounds: 60,
            horizon: 4,
            delta: 1.0,
            shielded: true,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub episodes: usize,
    pub collisions: usize,
    pub decisions: usize,
    /// Decisions at which even the best task had a positive value.
    pub risky_decisions: usize,
    pub max_task_len: usize,
}

/// The deterministic adversary of the safety run: at each decision location it always
/// takes the task indexed by the location id modulo the number of tasks.
pub fn fixed_adversary(arena: &Arena) -> AdversaryBehavior {
    deterministic_behavior(arena, |v, ts| ts[v.index() % ts.len()])
}

/// Random avatar (restricted to the shield when enabled) against [`fixed_adversary`]
/// on a plain arena; counts episodes that reach a collision.
pub fn safety_experiment(config: &SafetyConfig) -> Result<SafetyReport, HarnessError> {
    let arena = crate::arena::gridworld_from_ascii(&config.map)?;
    let behaviors = vec![fixed_adversary(&arena)];
    let dls = arena.decision_locations().to_vec();
    if dls.len() < 2 {
        return Err(HarnessError::Config("need two decision locations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = SafetyReport {
        episodes: config.episodes,
        max_task_len: (0..arena.num_tasks() as u32).map(|t| arena.task(TaskId(t)).len()).max().unwrap_or(0),
        ..Default::default()
    };
    let mut online: OnlineShield<()> = OnlineShield::new(config.horizon, config.delta, None)?;
    for _ in 0..config.episodes {
        let a = dls[rng.random_range(0..dls.len())];
        let mut e = a;
        while e == a {
            e = dls[rng.random_range(0..dls.len())];
        }
        let mut s = GlobalState::new(vec![a, e], ());
        'episode: for _ in 0..config.rounds {
            for _ in 0..s.num_agents() {
                let allowed = if config.shielded && is_decision_state(&s) {
                    let shield = online.compute(&arena, &behaviors, &s, collision)?;
                    report.decisions += 1;
                    if shield.valuation.optimal > 0.0 {
                        report.risky_decisions += 1;
                    }
                    Some(shield.allowed.clone())
                } else {
                    None
                };
                let mut env_rng = ChaCha8Rng::seed_from_u64(rng.random());
                let pick = |_: &GlobalState<()>, ts: &[TaskId]| ts[rng.random_range(0..ts.len())];
                s = advance_turn(&arena, &behaviors, &s, pick, allowed.as_deref(), &mut env_rng)?;
                if collision(&s) {
                    report.collisions += 1;
                    break 'episode;
                }
            }
        }
        online.clear();
    }
    Ok(report)
}

/// Valuation with a fixed absolute threshold: tasks with value at most `lambda`.
/// Kept only to demonstrate that it can leave no task at all.
pub fn absolute_threshold_tasks(values: &[(TaskId, f64)], lambda: f64) -> Vec<TaskId> {
    values.iter().filter(|&&(_, v)| v <= lambda).map(|&(t, _)| t).collect()
}

/// Relative shield of the same values, for contrast with [`absolute_threshold_tasks`].
pub fn relative_threshold_tasks(values: &[(TaskId, f64)], delta: f64) -> Result<Vec<TaskId>, HarnessError> {
    Ok(make_shield(crate::shield::TaskValuation::new(values.to_vec()), delta)?.allowed)
}
