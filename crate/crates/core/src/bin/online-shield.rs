use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use online_shield::arena::{gridworld_from_ascii, load_arena, Arena, EXAMPLE_MAZE};
use online_shield::behavior::{load_behavior, AdversaryBehavior};
use online_shield::harness::{
    bench_csv, bench_horizon, behaviors_for, check, export_dot, reward_csv, simulate, state_from_doc, train,
    BenchConfig, Mode, SimulateConfig, StateDoc, TrainConfig,
};
use online_shield::mdp::GlobalState;
use online_shield::rl::{LearnerConfig, QFunction};
use online_shield::service::{serve, ControlMode, ServiceConfig};
use online_shield::snake::{SnakeConfig, SMALL_SNAKE_MAP, SNAKE_MAP};

#[derive(Parser)]
#[command(name = "online-shield", version, about = "Online shielding for agents among stochastic adversaries")]
struct Cli {
    /// Map file: ASCII gridworld (snake maps mark spawns with A and E) or arena JSON.
    #[arg(long, global = true)]
    map: Option<PathBuf>,
    /// Rounds of look-ahead past the next decision.
    #[arg(long, global = true)]
    horizon: Option<u32>,
    #[arg(long, global = true, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Adversary behaviour document; repeat for several adversaries.
    #[arg(long, global = true)]
    behavior: Vec<PathBuf>,
    /// Cap on shield recomputations after adversary decisions; 0 means unlimited.
    #[arg(long = "budget-ms", global = true, default_value_t = 0)]
    budget_ms: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Shield valuation of one state, as JSON.
    Check(StateArgs),
    /// Play games with a fixed policy and report statistics.
    Simulate(SimulateArgs),
    /// Q-learning; writes the windowed reward CSV and the learned weights.
    Train(TrainArgs),
    /// Shield computation time per horizon and snake length, as CSV.
    Bench(BenchArgs),
    /// Run the demonstrator game service.
    Serve(ServeArgs),
    /// Sub-MDP of one state in Graphviz format.
    ExportDot(StateArgs),
}

#[derive(Args)]
struct StateArgs {
    /// State document: agent positions, remaining task locations and turn.
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ShieldFlag {
    #[arg(long, conflicts_with = "no_shield")]
    shield: bool,
    #[arg(long = "no-shield")]
    no_shield: bool,
}

impl ShieldFlag {
    fn enabled(&self) -> bool {
        !self.no_shield
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[command(flatten)]
    shield: ShieldFlag,
    /// Greedy play with these weights instead of random corridors.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 800)]
    episodes: usize,
    #[command(flatten)]
    shield: ShieldFlag,
    #[arg(long = "eval-games", default_value_t = 200)]
    eval_games: usize,
    /// Reward CSV destination; stdout if absent.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long = "weights-out")]
    weights_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Inclusive range `a..b` or a comma-separated list.
    #[arg(long, default_value = "10..20")]
    horizons: String,
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 15])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Human,
    Rl,
    Random,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long = "tick-ms", default_value_t = 200)]
    tick_ms: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Human)]
    mode: ModeArg,
    /// Q-function for the rl mode.
    #[arg(long)]
    weights: Option<PathBuf>,
}

/// Errors in how the tool was invoked, reported with exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn map_text(cli: &Cli, default: &str) -> Result<String> {
    match &cli.map {
        Some(p) => read(p),
        None => Ok(default.to_string()),
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(usage(format!("--delta {delta} is outside [0, 1]")));
    }
    Ok(())
}

fn snake_only(cli: &Cli) -> Result<()> {
    if !cli.behavior.is_empty() {
        return Err(usage("--behavior applies to check and export-dot; snake adversaries follow their apples"));
    }
    Ok(())
}

fn load_weights(path: Option<&Path>) -> Result<Option<QFunction>> {
    path.map(|p| Ok(QFunction::from_json(&read(p)?)?)).transpose()
}

/// Arena, behaviours and state for `check` and `export-dot`.
fn state_inputs(cli: &Cli, args: &StateArgs) -> Result<(Arena, Vec<AdversaryBehavior>, GlobalState<()>)> {
    let text = map_text(cli, EXAMPLE_MAZE)?;
    let arena = if text.trim_start().starts_with('{') {
        load_arena(text.as_bytes())?
    } else {
        gridworld_from_ascii(&text)?
    };
    let doc: StateDoc = serde_json::from_str(&read(&args.state)?).context("parsing the state document")?;
    let state = state_from_doc(&arena, &doc)?;
    let mut given = Vec::new();
    for p in &cli.behavior {
        given.push(load_behavior(&arena, read(p)?.as_bytes())?);
    }
    let behaviors = behaviors_for(&arena, state.positions.len() - 1, &given)?;
    Ok((arena, behaviors, state))
}

fn parse_horizons(text: &str) -> Result<Vec<u32>> {
    let bad = || usage(format!("--horizons '{text}': expected a..b or a comma-separated list"));
    let hs: Vec<u32> = if let Some((a, b)) = text.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        text.split(',').map(|h| h.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?
    };
    if hs.is_empty() || hs.contains(&0) {
        return Err(bad());
    }
    Ok(hs)
}

fn run(cli: Cli) -> Result<()> {
    check_delta(cli.delta)?;
    if cli.horizon == Some(0) {
        return Err(usage("--horizon must be at least 1"));
    }
    match &cli.command {
        Command::Check(args) => {
            let (arena, behaviors, state) = state_inputs(&cli, args)?;
            let report = check(&arena, &behaviors, &state, cli.horizon.unwrap_or(10), cli.delta)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            write_or_print(args.out.as_deref(), &json)
        }
        Command::ExportDot(args) => {
            let (arena, behaviors, state) = state_inputs(&cli, args)?;
            let dot = export_dot(&arena, &behaviors, &state, cli.horizon.unwrap_or(3))?;
            write_or_print(args.out.as_deref(), &dot)
        }
        Command::Simulate(args) => {
            snake_only(&cli)?;
            let config = SimulateConfig {
                map: map_text(&cli, SNAKE_MAP)?,
                snake: SnakeConfig::default(),
                episodes: args.episodes,
                seed: cli.seed,
                horizon: cli.horizon.unwrap_or(12),
                delta: cli.delta,
                shielded: args.shield.enabled(),
                budget_ms: cli.budget_ms,
                weights: load_weights(args.weights.as_deref())?,
            };
            let stats = simulate(&config)?;
            println!("{}", serde_json::to_string(&stats)?);
            Ok(())
        }
        Command::Train(args) => {
            snake_only(&cli)?;
            let defaults = TrainConfig::default();
            let config = TrainConfig {
                map: map_text(&cli, SMALL_SNAKE_MAP)?,
                learner: LearnerConfig {
                    episodes: args.episodes,
                    horizon: cli.horizon.unwrap_or(defaults.learner.horizon),
                    delta: cli.delta,
                    budget_ms: cli.budget_ms,
                    ..defaults.learner
                },
                seed: cli.seed,
                eval_games: args.eval_games,
                ..defaults
            };
            let mode = if args.shield.enabled() {
                Mode::Shielded
            } else {
                Mode::Unshielded
            };
            let report = train(&config, mode)?;
            write_or_print(args.csv.as_deref(), &reward_csv(&report.curve))?;
            if let Some(p) = &args.weights_out {
                std::fs::write(p, report.q.to_json()).with_context(|| format!("writing {}", p.display()))?;
            }
            eprintln!(
                "{}",
                serde_json::json!({
                    "mode": mode.as_str(),
                    "training": report.training,
                    "evaluation": report.evaluation,
                    "weights": report.q.weights,
                })
            );
            Ok(())
        }
        Command::Bench(args) => {
            snake_only(&cli)?;
            if cli.horizon.is_some() {
                return Err(usage("bench takes --horizons, not --horizon"));
            }
            if args.samples == 0 || args.lengths.is_empty() {
                return Err(usage("bench needs at least one sample and one length"));
            }
            let config = BenchConfig {
                map: map_text(&cli, SNAKE_MAP)?,
                horizons: parse_horizons(&args.horizons)?,
                lengths: args.lengths.clone(),
                samples: args.samples,
                seed: cli.seed,
            };
            let records = bench_horizon(&config)?;
            write_or_print(args.out.as_deref(), &bench_csv(&records))
        }
        Command::Serve(args) => {
            snake_only(&cli)?;
            let config = ServiceConfig {
                map: map_text(&cli, SNAKE_MAP)?,
                horizon: cli.horizon.unwrap_or(15),
                delta: cli.delta,
                tick: Duration::from_millis(args.tick_ms.max(1)),
                seed: cli.seed,
                mode: match args.mode {
                    ModeArg::Human => ControlMode::Human,
                    ModeArg::Rl => ControlMode::Rl,
                    ModeArg::Random => ControlMode::Random,
                },
                q: load_weights(args.weights.as_deref())?.unwrap_or_default(),
                snake: SnakeConfig::default(),
                budget_ms: cli.budget_ms,
            };
            let addr = SocketAddr::from(([0, 0, 0, 0], args.port));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(config, addr, None))?;
            bail!("service stopped")
        }
    }
}
