use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use super::agent::{Agent, Controller, GreedyController, PlanRecord, Planner};
use super::config::{stream, AgentKind, ExperimentConfig, TrainTasks};
use crate::checkpoints::Context;
use crate::distributions::D_MAX;
use crate::error::{Error, Result};
use crate::gridworld::{generate_task, initial_state, step, CellKind, SpawnMode, Transition};
use crate::oracle::{shortest_distances, DistanceMatrix};
use crate::replay::{relabel, HindsightSample, ReplayBuffer};

/// Context ids of evaluation tasks start here, clear of training ids.
pub const EVAL_CONTEXT_BASE: u32 = 0x8000_0000;

/// Name of the split evaluated on the training tasks.
pub const TRAIN_SPLIT: &str = "train";

/// Evaluation results for one split at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub success_rate: f64,
    pub episodes: usize,
    /// Planning decisions made during the episodes.
    pub plans: usize,
    /// Fraction of plans whose target was delusional.
    pub delusion_frequency: Option<f64>,
    /// Mean |d̂ − true| over edges into delusional vertices.
    pub delusion_l1: Option<f64>,
    /// Fraction of plans whose target was optimal.
    pub target_optimality: Option<f64>,
}

/// One evaluation point of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub agent: AgentKind,
    pub seed: u64,
    pub interactions: u64,
    pub splits: Vec<SplitMetrics>,
}

impl MetricsRecord {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub agent: Agent,
}

/// A named list of evaluation contexts.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub name: String,
    pub contexts: Vec<Context>,
}

/// Name of the held-out split at `difficulty`.
pub fn split_name(difficulty: f64) -> String {
    format!("{difficulty}")
}

/// Held-out evaluation splits, shared by every seed.
pub fn eval_splits(config: &ExperimentConfig) -> Result<Vec<EvalSplit>> {
    config
        .eval_difficulties
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let contexts = config
                .eval_tasks(d)?
                .into_iter()
                .enumerate()
                .map(|(i, t)| Context::new(EVAL_CONTEXT_BASE + (k as u32 + 1) * 1000 + i as u32, Arc::new(t)))
                .collect();
            Ok(EvalSplit {
                name: split_name(d),
                contexts,
            })
        })
        .collect()
}

/// Runs every configured seed in parallel.
pub fn run_training(config: &ExperimentConfig) -> Result<Vec<RunOutput>> {
    config.validate()?;
    let splits = eval_splits(config)?;
    config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, seed, &splits))
        .collect()
}

/// Aggregate delusion and target statistics over a set of plans.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DelusionStats {
    pub plans: usize,
    pub delusional: usize,
    pub optimal: usize,
    pub l1_sum: f64,
    pub l1_edges: usize,
}

impl DelusionStats {
    pub fn frequency(&self) -> Option<f64> {
        (self.plans > 0).then(|| self.delusional as f64 / self.plans as f64)
    }

    pub fn l1(&self) -> Option<f64> {
        (self.l1_edges > 0).then(|| self.l1_sum / self.l1_edges as f64)
    }

    pub fn optimality(&self) -> Option<f64> {
        (self.plans > 0).then(|| self.optimal as f64 / self.plans as f64)
    }

    pub fn merge(&mut self, other: &DelusionStats) {
        self.plans += other.plans;
        self.delusional += other.delusional;
        self.optimal += other.optimal;
        self.l1_sum += other.l1_sum;
        self.l1_edges += other.l1_edges;
    }

    /// Scores one plan against true shortest distances.
    ///
    /// A vertex is delusional when its position is lava or cut off from the
    /// goal. No real vertex can reach it, so its true distance is `D_MAX`.
    pub fn add(&mut self, plan: &PlanRecord, ctx: &Context, dist: &DistanceMatrix) {
        let task = ctx.task();
        let g = &plan.graph;
        let current = g.vertices[0].position;
        let delusional: Vec<bool> = g.vertices.iter().map(|v| !ctx.is_valid_position(v.position)).collect();
        self.plans += 1;
        let target = g.vertices[plan.target].position;
        if delusional[plan.target] {
            self.delusional += 1;
        } else {
            let to_target = dist.between(task, current, target);
            let via = to_target + dist.between(task, target, task.goal());
            let direct = dist.between(task, current, task.goal());
            if direct.is_finite() && via == direct && to_target <= g.threshold {
                self.optimal += 1;
            }
        }
        for i in (0..g.len()).filter(|&i| !delusional[i]) {
            for j in (0..g.len()).filter(|&j| j != i && delusional[j]) {
                self.l1_sum += (g.distance[i][j] - D_MAX as f64).abs();
                self.l1_edges += 1;
            }
        }
    }
}

/// Delusion statistics of `plans`, all made in `ctx`.
pub fn delusion_metrics(plans: &[PlanRecord], ctx: &Context) -> DelusionStats {
    let dist = shortest_distances(ctx.task());
    let mut stats = DelusionStats::default();
    for p in plans {
        stats.add(p, ctx, &dist);
    }
    stats
}

/// Plays one episode from the evaluation spawn; true if the goal was reached.
pub fn play_episode(controller: &mut dyn Controller, ctx: &Context, noise: f64, rng: &mut ChaCha8Rng) -> Result<bool> {
    let task = ctx.task();
    let mut state = initial_state(task, SpawnMode::EvalOpposite, rng);
    controller.reset(ctx, state, rng)?;
    for _ in 0..task.step_cap() {
        let action = controller.act(ctx, state, rng)?;
        state = step(task, state, action, noise, rng)?.next_state;
        if state.terminated {
            return Ok(task.cell(state.position) == CellKind::Goal);
        }
    }
    Ok(false)
}

/// Success rate over `episodes` episodes, cycling through `contexts`.
pub fn evaluate(
    controller: &mut dyn Controller,
    contexts: &[Context],
    episodes: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::Contract("evaluation needs at least one task".into()));
    }
    if episodes == 0 {
        return Err(Error::Contract("evaluation needs at least one episode".into()));
    }
    let mut successes = 0;
    for i in 0..episodes {
        if play_episode(controller, &contexts[i % contexts.len()], noise, rng)? {
            successes += 1;
        }
    }
    Ok(successes as f64 / episodes as f64)
}

/// Greedy evaluation of `agent` with plan statistics.
pub fn evaluate_agent(
    agent: &Agent,
    split: &EvalSplit,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SplitMetrics> {
    if split.contexts.is_empty() || episodes == 0 {
        return Err(Error::Contract(format!("split {:?} has nothing to evaluate", split.name)));
    }
    let noise = agent.config.noise;
    let mut distances: FxHashMap<u32, DistanceMatrix> = FxHashMap::default();
    let mut stats = DelusionStats::default();
    let mut successes = 0;
    for i in 0..episodes {
        let ctx = &split.contexts[i % split.contexts.len()];
        let mut controller = GreedyController::recording(agent);
        if play_episode(&mut controller, ctx, noise, rng)? {
            successes += 1;
        }
        let dist = distances
            .entry(ctx.id())
            .or_insert_with(|| shortest_distances(ctx.task()));
        for plan in controller.log.iter().flatten() {
            stats.add(plan, ctx, dist);
        }
    }
    Ok(SplitMetrics {
        split: split.name.clone(),
        success_rate: successes as f64 / episodes as f64,
        episodes,
        plans: stats.plans,
        delusion_frequency: stats.frequency(),
        delusion_l1: stats.l1(),
        target_optimality: stats.optimality(),
    })
}

fn evaluation_point(
    agent: &Agent,
    seed: u64,
    point: usize,
    interactions: u64,
    splits: &[&EvalSplit],
) -> Result<MetricsRecord> {
    let cfg = &agent.config;
    let metrics = splits
        .iter()
        .enumerate()
        .map(|(k, split)| {
            let mut rng = stream(cfg.master_seed, (4 << 40) + (seed << 24) + ((point as u64) << 8) + k as u64);
            evaluate_agent(agent, split, cfg.eval_episodes, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(MetricsRecord {
        agent: cfg.agent,
        seed,
        interactions,
        splits: metrics,
    })
}

/// One seeded training run with evaluation at every configured point.
pub fn run_seed(config: &ExperimentConfig, seed: u64, held_out: &[EvalSplit]) -> Result<RunOutput> {
    config.validate()?;
    let mut agent = Agent::new(config);
    let mut rng = stream(config.master_seed, (3 << 40) + seed);
    let mut fresh_rng = config.fresh_task_rng(seed);

    let mut contexts: FxHashMap<u32, Context> = FxHashMap::default();
    let fixed: Vec<Context> = config
        .train_tasks(seed)?
        .into_iter()
        .enumerate()
        .map(|(i, t)| Context::new(i as u32, Arc::new(t)))
        .collect();
    for c in &fixed {
        contexts.insert(c.id(), c.clone());
    }
    let train_split = EvalSplit {
        name: TRAIN_SPLIT.into(),
        contexts: match config.num_train_tasks {
            TrainTasks::Fixed(_) => fixed.clone(),
            TrainTasks::Fresh => {
                let tasks = config.eval_tasks(config.train_difficulty)?;
                tasks
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| Context::new(EVAL_CONTEXT_BASE + i as u32, Arc::new(t)))
                    .collect()
            }
        },
    };
    let splits: Vec<&EvalSplit> = std::iter::once(&train_split).chain(held_out).collect();

    let points = config.eval_points();
    let mut next_point = 0;
    let mut records = Vec::with_capacity(points.len());
    let schedule = agent.epsilon_schedule();
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut next_fresh_id = fixed.len() as u32;
    let mut t: u64 = 0;

    while t < config.total_interactions {
        let ctx = match config.num_train_tasks {
            TrainTasks::Fixed(_) => fixed[rng.random_range(0..fixed.len())].clone(),
            TrainTasks::Fresh => {
                let task = generate_task(config.width, config.height, config.train_difficulty, fresh_rng.random())?;
                let ctx = Context::new(next_fresh_id, Arc::new(task));
                next_fresh_id += 1;
                contexts.insert(ctx.id(), ctx.clone());
                ctx
            }
        };
        let task = ctx.task();
        let mut state = initial_state(task, SpawnMode::TrainUniform, &mut rng);
        let mut planner = Planner::new(&ctx);
        planner.begin(&agent, &ctx, state, &mut rng, None)?;
        let mut trajectory: Vec<Transition> = Vec::new();

        for _ in 0..task.step_cap() {
            planner.before_step(&agent, &ctx, state, &mut rng, None)?;
            let action = agent.behave(&ctx, state, planner.target, schedule.value(t), &mut rng);
            let transition = step(task, state, action, config.noise, &mut rng)?;
            trajectory.push(transition);
            state = transition.next_state;
            t += 1;

            if t % config.train_every == 0 && !buffer.is_empty() {
                let batch = buffer.sample_batch(config.batch_size, &mut rng)?;
                agent.train(&batch, &contexts, &mut rng)?;
            }
            if next_point < points.len() && t == points[next_point] {
                records.push(evaluation_point(&agent, seed, next_point, t, &splits)?);
                next_point += 1;
            }
            if state.terminated || t >= config.total_interactions {
                break;
            }
        }

        if agent.kind() == AgentKind::Modelfree {
            let goal = task.goal_state();
            buffer.extend(trajectory.iter().map(|&transition| HindsightSample {
                transition,
                goal,
                task_id: ctx.id(),
            }));
        } else {
            buffer.extend(relabel(&trajectory, config.her_k, ctx.id(), &mut rng));
        }
    }

    Ok(RunOutput { seed, records, agent })
}
