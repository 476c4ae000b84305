use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use proxyplan::checkpoints::Context;
use proxyplan::gridworld::{generate_task, MazeTask};
use proxyplan::harness::agent::{Agent, AgentSnapshot, GreedyController};
use proxyplan::harness::bound::{bound_sweep, standard_fixtures};
use proxyplan::harness::config::{stream, AgentKind, ExperimentConfig};
use proxyplan::harness::metrics::export_metrics;
use proxyplan::harness::run::{eval_splits, evaluate_agent, play_episode, run_training, SplitMetrics};
use proxyplan::oracle::OracleTables;

#[derive(Parser)]
#[command(name = "proxyplan", version, about = "Checkpoint planning experiments on lava mazes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write metrics and agent snapshots.
    Train(TrainArgs),
    /// Evaluate a saved agent on held-out tasks.
    Eval(EvalArgs),
    /// Compute exact DP tables for a task file.
    Oracle(OracleArgs),
    /// Check the composite-value error bound on the standard fixtures.
    BoundCheck(BoundArgs),
    /// Generate task files.
    GenTasks(GenArgs),
}

#[derive(Args)]
struct Overrides {
    /// Flat JSON or TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    agent: Option<AgentKind>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl Overrides {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_path(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(agent) = self.agent {
            cfg.agent = agent;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Agent snapshot written by `train`.
    snapshot: PathBuf,
    /// Episodes per split; defaults to the snapshot's config.
    #[arg(long)]
    episodes: Option<usize>,
    /// Master seed for the held-out tasks; defaults to the snapshot's.
    #[arg(long)]
    seed: Option<u64>,
    /// Action noise; defaults to the snapshot's.
    #[arg(long)]
    noise: Option<f64>,
    /// Write the results here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the proxy graphs of one episode on the first held-out task here.
    #[arg(long)]
    plans_out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Task JSON file.
    task: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.95)]
    gamma_intrinsic: f64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the full report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 0.4)]
    difficulty: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "tasks")]
    out_dir: PathBuf,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.common.config()?;
    let out = &args.common.out_dir;
    eprintln!("training {} on {} seed(s)", cfg.agent, cfg.seeds.len());
    let runs = run_training(&cfg)?;
    let records: Vec<_> = runs.iter().flat_map(|r| r.records.iter().cloned()).collect();
    let (csv, json) = export_metrics(&records, Some(&cfg), out)?;
    for run in &runs {
        let path = out.join(format!("agent-seed{}.json", run.seed));
        write_json(&path, &run.agent.snapshot())?;
    }
    for run in &runs {
        if let Some(last) = run.records.last() {
            let line: Vec<String> = last
                .splits
                .iter()
                .map(|s| format!("{}={:.2}", s.split, s.success_rate))
                .collect();
            println!("seed {}: {}", run.seed, line.join(" "));
        }
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn print_table(rows: &[SplitMetrics]) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    println!("{:<8} {:>8} {:>8} {:>10} {:>8} {:>10}", "split", "success", "plans", "delusion", "l1", "optimal");
    for r in rows {
        println!(
            "{:<8} {:>8.3} {:>8} {:>10} {:>8} {:>10}",
            r.split,
            r.success_rate,
            r.plans,
            opt(r.delusion_frequency),
            opt(r.delusion_l1),
            opt(r.target_optimality)
        );
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&args.snapshot).with_context(|| format!("reading {}", args.snapshot.display()))?;
    let snapshot: AgentSnapshot =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.snapshot.display()))?;
    let mut agent = Agent::from_snapshot(snapshot)?;
    if let Some(noise) = args.noise {
        agent.config.noise = noise;
    }
    if let Some(seed) = args.seed {
        agent.config.master_seed = seed;
    }
    agent.config.validate()?;
    let episodes = args.episodes.unwrap_or(agent.config.eval_episodes);
    if episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    let splits = eval_splits(&agent.config)?;
    let rows = splits
        .iter()
        .enumerate()
        .map(|(k, split)| evaluate_agent(&agent, split, episodes, &mut stream(agent.config.master_seed, k as u64)))
        .collect::<proxyplan::Result<Vec<_>>>()?;
    print_table(&rows);
    if let Some(out) = &args.out {
        write_json(out, &rows)?;
    }
    if let Some(path) = &args.plans_out {
        let ctx = splits
            .first()
            .and_then(|s| s.contexts.first())
            .context("no held-out tasks configured")?;
        let mut controller = GreedyController::recording(&agent);
        play_episode(&mut controller, ctx, agent.config.noise, &mut stream(agent.config.master_seed, 99))?;
        write_json(path, &controller.log.unwrap_or_default())?;
    }
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let text = fs::read_to_string(&args.task).with_context(|| format!("reading {}", args.task.display()))?;
    let task: MazeTask = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.task.display()))?;
    let ctx = Context::new(0, Arc::new(task));
    let tables = OracleTables::compute(&ctx, args.gamma, args.noise, args.gamma_intrinsic)?;
    match &args.out {
        Some(path) => write_json(path, &tables)?,
        None => println!("{}", serde_json::to_string_pretty(&tables)?),
    }
    Ok(())
}

fn bound_check(args: BoundArgs) -> Result<()> {
    let fixtures = standard_fixtures(0.99, 0.95)?;
    let report = bound_sweep(&fixtures, args.seed);
    for f in &fixtures {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.fixture == f.name).collect();
        let worst = rows
            .iter()
            .map(|r| r.observed / r.bound)
            .fold(0.0, f64::max);
        let ok = rows.iter().all(|r| r.within);
        println!(
            "{:<20} edges {:>2}  worst observed/bound {:.3}  {}",
            f.name,
            f.values.len(),
            worst,
            if ok { "ok" } else { "VIOLATED" }
        );
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    if !report.all_within() {
        bail!("error exceeded {}x the bound in some cases", report.slack);
    }
    println!("all {} cases within {}x the bound", report.rows.len(), report.slack);
    Ok(())
}

fn gen_tasks(args: GenArgs) -> Result<()> {
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut rng = stream(args.seed, 0);
    for i in 0..args.count {
        let task = generate_task(args.width, args.height, args.difficulty, rand::Rng::random(&mut rng))?;
        write_json(&args.out_dir.join(format!("task-{i:03}.json")), &task)?;
    }
    println!("wrote {} tasks to {}", args.count, args.out_dir.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Oracle(a) => oracle(a),
        Command::BoundCheck(a) => bound_check(a),
        Command::GenTasks(a) => gen_tasks(a),
    }
}
