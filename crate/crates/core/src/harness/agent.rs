use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use super::config::{AgentKind, ExperimentConfig};
use crate::checkpoints::{self, Context, PartialDescription, TRUNCATED_DISTANCE};
use crate::error::{Error, Result};
use crate::estimators::{
    greedy_random_tie, EdgeEstimate, EdgeEstimatorTables, EpsilonSchedule, EstimatorSnapshot,
    GoalConditionedQ, SNAPSHOT_VERSION,
};
use crate::gridworld::{Action, EnvState, Pos};
use crate::oracle::{oracle_plan, LowLevel, OptimalPolicy, OraclePlan};
use crate::planner::{
    build_graph, replan_policy, select_target, value_iterate, EdgeSource, Learned, ProxyGraph,
    ReplanAction, ReplanEvent, TERMINAL_THRESHOLD,
};
use crate::replay::HindsightSample;

/// A learning agent: the policy and estimator tables plus the settings that
/// drive them.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: ExperimentConfig,
    pub policy: GoalConditionedQ,
    pub tables: EdgeEstimatorTables,
}

/// On-disk form of an [`Agent`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub version: u32,
    pub config: ExperimentConfig,
    pub estimators: EstimatorSnapshot,
}

impl Agent {
    pub fn new(config: &ExperimentConfig) -> Self {
        let abstraction = config.abstraction();
        let gamma_policy = match config.agent {
            AgentKind::Modelfree => config.gamma_task,
            _ => config.gamma_intrinsic,
        };
        Agent {
            config: config.clone(),
            policy: GoalConditionedQ::new(abstraction, gamma_policy),
            tables: EdgeEstimatorTables::new(abstraction, config.gamma_task),
        }
    }

    pub fn kind(&self) -> AgentKind {
        self.config.agent
    }

    pub fn plans(&self) -> bool {
        self.kind().replan_mode().is_some()
    }

    pub fn snapshot(&self) -> AgentSnapshot {
        AgentSnapshot {
            version: SNAPSHOT_VERSION,
            config: self.config.clone(),
            estimators: EstimatorSnapshot::new(self.policy.clone(), self.tables.clone()),
        }
    }

    pub fn from_snapshot(snapshot: AgentSnapshot) -> Result<Self> {
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(Error::Contract(format!(
                "agent snapshot version {} is not {SNAPSHOT_VERSION}",
                snapshot.version
            )));
        }
        snapshot.config.validate()?;
        Ok(Agent {
            config: snapshot.config,
            policy: snapshot.estimators.policy,
            tables: snapshot.estimators.tables,
        })
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.config.epsilon_start,
            end: self.config.epsilon_end,
            fraction: self.config.epsilon_fraction,
            total: self.config.total_interactions,
        }
    }

    /// One training step on a replay batch.
    pub fn train(
        &mut self,
        batch: &[HindsightSample],
        contexts: &FxHashMap<u32, Context>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let alpha = self.config.learning_rate;
        self.policy.update(batch, contexts, alpha)?;
        if !self.plans() {
            return Ok(());
        }
        self.tables.update_value(&self.policy, batch, contexts, alpha)?;
        self.tables.update_distance(&self.policy, batch, contexts, alpha)?;
        self.tables.update_terminal(batch, contexts, alpha)?;
        if self.config.delusion_suppression {
            let include_invalid = self.config.include_invalid;
            self.tables.suppress_delusions(
                &self.policy,
                batch,
                contexts,
                |ctx: &Context| propose(ctx, include_invalid, rng),
                self.config.suppression_scale,
                alpha,
            )?;
        }
        Ok(())
    }

    /// ε-greedy action toward `target`, ties broken at random.
    pub fn behave(&self, ctx: &Context, state: EnvState, target: EnvState, epsilon: f64, rng: &mut ChaCha8Rng) -> Action {
        if epsilon > 0.0 && rng.random_bool(epsilon) {
            return Action::from_index(rng.random_range(0..Action::COUNT));
        }
        greedy_random_tie(&self.policy.q_values(ctx, state.position, target), rng)
    }

    fn source<'a>(&'a self, ctx: &'a Context) -> Learned<'a> {
        Learned {
            context: ctx,
            policy: &self.policy,
            tables: &self.tables,
            truncation: TRUNCATED_DISTANCE,
        }
    }
}

/// A single generated checkpoint, drawn like one sample of [`checkpoints::generate`].
fn propose(ctx: &Context, include_invalid: bool, rng: &mut ChaCha8Rng) -> EnvState {
    let task = ctx.task();
    loop {
        let p = task.pos(rng.random_range(0..task.num_cells()));
        if include_invalid || ctx.is_valid_position(p) {
            return checkpoints::fuse(ctx, PartialDescription { position: p });
        }
    }
}

/// Edge estimates over a fixed state list, computed once.
struct EdgeCache {
    states: Vec<EnvState>,
    edges: Vec<EdgeEstimate>,
}

impl EdgeCache {
    fn new(states: Vec<EnvState>, source: &dyn EdgeSource) -> Self {
        let mut edges = Vec::with_capacity(states.len() * states.len());
        for &a in &states {
            for &b in &states {
                edges.push(source.edge(a, b));
            }
        }
        EdgeCache { states, edges }
    }

    fn index(&self, s: EnvState) -> usize {
        self.states.iter().position(|&t| t == s).expect("cached state")
    }

    fn get(&self, i: usize, j: usize) -> &EdgeEstimate {
        &self.edges[i * self.states.len() + j]
    }
}

impl EdgeSource for EdgeCache {
    fn edge(&self, from: EnvState, to: EnvState) -> EdgeEstimate {
        *self.get(self.index(from), self.index(to))
    }
}

/// The proxy problem behind one planning decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanRecord {
    pub graph: ProxyGraph,
    pub target: usize,
    pub fallback: bool,
}

/// Checkpoint-level control state for one episode.
#[derive(Debug, Clone)]
pub struct Planner {
    graph: Option<ProxyGraph>,
    pub target: EnvState,
    since_plan: usize,
    pub plans: usize,
}

impl Planner {
    pub fn new(ctx: &Context) -> Self {
        Planner {
            graph: None,
            target: ctx.task().goal_state(),
            since_plan: 0,
            plans: 0,
        }
    }

    pub fn graph(&self) -> Option<&ProxyGraph> {
        self.graph.as_ref()
    }

    pub fn begin(
        &mut self,
        agent: &Agent,
        ctx: &Context,
        state: EnvState,
        rng: &mut ChaCha8Rng,
        log: Option<&mut Vec<PlanRecord>>,
    ) -> Result<()> {
        self.graph = None;
        self.target = ctx.task().goal_state();
        self.since_plan = 0;
        if agent.plans() {
            self.replan(agent, ctx, state, ReplanEvent::EpisodeStart, rng, log)?;
        }
        Ok(())
    }

    /// Replans if the target was reached or the replan interval elapsed,
    /// then counts the coming step.
    pub fn before_step(
        &mut self,
        agent: &Agent,
        ctx: &Context,
        state: EnvState,
        rng: &mut ChaCha8Rng,
        log: Option<&mut Vec<PlanRecord>>,
    ) -> Result<()> {
        if agent.plans() {
            let event = if state == self.target {
                Some(ReplanEvent::CheckpointReached)
            } else if self.since_plan >= agent.config.replan_interval {
                Some(ReplanEvent::Timeout)
            } else {
                None
            };
            if let Some(event) = event {
                self.replan(agent, ctx, state, event, rng, log)?;
            }
        }
        self.since_plan += 1;
        Ok(())
    }

    fn replan(
        &mut self,
        agent: &Agent,
        ctx: &Context,
        state: EnvState,
        event: ReplanEvent,
        rng: &mut ChaCha8Rng,
        log: Option<&mut Vec<PlanRecord>>,
    ) -> Result<()> {
        let mode = agent.kind().replan_mode().expect("planning agent");
        let action = match (&self.graph, replan_policy(mode, event)) {
            (Some(_), ReplanAction::ReplanOnExistingGraph) => ReplanAction::ReplanOnExistingGraph,
            _ => ReplanAction::RebuildGraphAndPlan,
        };
        match action {
            ReplanAction::RebuildGraphAndPlan => {
                self.graph = Some(build_proxy(agent, ctx, state, rng)?);
            }
            ReplanAction::ReplanOnExistingGraph => {
                let source = agent.source(ctx);
                self.graph.as_mut().expect("graph").rebind(state, &source);
            }
        }
        let graph = self.graph.as_ref().expect("graph");
        let values = value_iterate(graph, agent.config.vi_iterations)?;
        let plan = select_target(graph, &values)?;
        self.target = graph.vertices[plan.target];
        self.since_plan = 0;
        self.plans += 1;
        if let Some(log) = log {
            log.push(PlanRecord {
                graph: graph.clone(),
                target: plan.target,
                fallback: plan.fallback,
            });
        }
        Ok(())
    }
}

/// Generate, prune and assemble a proxy problem rooted at `state`.
pub fn build_proxy(agent: &Agent, ctx: &Context, state: EnvState, rng: &mut ChaCha8Rng) -> Result<ProxyGraph> {
    let cfg = &agent.config;
    let candidates =
        checkpoints::generate(ctx, cfg.n_generate, cfg.include_invalid, rng)?.deduplicated(Some(state));
    let mut states = Vec::with_capacity(candidates.len() + 1);
    states.push(state);
    states.extend(&candidates.checkpoints);
    let cache = EdgeCache::new(states, &agent.source(ctx));
    let n = candidates.len();
    let distance: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let e = cache.get(i + 1, j + 1);
                    if i == j {
                        0.0
                    } else if e.terminal_from > TERMINAL_THRESHOLD {
                        TRUNCATED_DISTANCE
                    } else {
                        e.truncated_distance
                    }
                })
                .collect()
        })
        .collect();
    let kept = checkpoints::kmedoids_prune(&candidates, &distance, cfg.k_prune, rng)?;
    let mut vertices = Vec::with_capacity(kept.len() + 1);
    vertices.push(state);
    vertices.extend(kept.checkpoints);
    build_graph(vertices, &cache, cfg.edge_threshold)
}

/// Something that can drive an evaluation episode.
pub trait Controller {
    fn reset(&mut self, ctx: &Context, start: EnvState, rng: &mut ChaCha8Rng) -> Result<()>;
    fn act(&mut self, ctx: &Context, state: EnvState, rng: &mut ChaCha8Rng) -> Result<Action>;
}

/// A trained agent acting greedily. Never modifies the agent.
pub struct GreedyController<'a> {
    agent: &'a Agent,
    planner: Option<Planner>,
    /// Plans made so far, if recording is on.
    pub log: Option<Vec<PlanRecord>>,
}

impl<'a> GreedyController<'a> {
    pub fn new(agent: &'a Agent) -> Self {
        GreedyController {
            agent,
            planner: None,
            log: None,
        }
    }

    pub fn recording(agent: &'a Agent) -> Self {
        GreedyController {
            agent,
            planner: None,
            log: Some(Vec::new()),
        }
    }
}

impl Controller for GreedyController<'_> {
    fn reset(&mut self, ctx: &Context, start: EnvState, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut planner = Planner::new(ctx);
        planner.begin(self.agent, ctx, start, rng, self.log.as_mut())?;
        self.planner = Some(planner);
        Ok(())
    }

    fn act(&mut self, ctx: &Context, state: EnvState, rng: &mut ChaCha8Rng) -> Result<Action> {
        let planner = self
            .planner
            .as_mut()
            .ok_or_else(|| Error::Contract("controller used before reset".into()))?;
        planner.before_step(self.agent, ctx, state, rng, self.log.as_mut())?;
        Ok(self.agent.behave(ctx, state, planner.target, 0.0, rng))
    }
}

/// Exact checkpoint plan plus the DP-optimal low-level policy.
pub struct OracleController {
    noise: f64,
    gamma_intrinsic: f64,
    cache: FxHashMap<u32, (OraclePlan, OptimalPolicy)>,
    target: Option<Pos>,
}

impl OracleController {
    pub fn new(noise: f64, gamma_intrinsic: f64) -> Self {
        OracleController {
            noise,
            gamma_intrinsic,
            cache: FxHashMap::default(),
            target: None,
        }
    }
}

impl Controller for OracleController {
    fn reset(&mut self, ctx: &Context, start: EnvState, _rng: &mut ChaCha8Rng) -> Result<()> {
        if !self.cache.contains_key(&ctx.id()) {
            let low = LowLevel::Optimal {
                gamma_intrinsic: self.gamma_intrinsic,
            };
            let plan = oracle_plan(ctx, self.noise, &low)?;
            let policy = OptimalPolicy::compute(ctx.task(), self.noise, self.gamma_intrinsic);
            self.cache.insert(ctx.id(), (plan, policy));
        }
        let (plan, _) = &self.cache[&ctx.id()];
        self.target = plan.next_target(ctx.task(), start.position);
        Ok(())
    }

    fn act(&mut self, ctx: &Context, state: EnvState, _rng: &mut ChaCha8Rng) -> Result<Action> {
        let (plan, policy) = self
            .cache
            .get(&ctx.id())
            .ok_or_else(|| Error::Contract("controller used before reset".into()))?;
        if self.target == Some(state.position) || self.target.is_none() {
            self.target = plan.next_target(ctx.task(), state.position);
        }
        Ok(match self.target {
            Some(t) => policy.action(ctx.task(), state.position, t),
            None => Action::Up,
        })
    }
}

/// Uniformly random actions.
pub struct RandomController;

impl Controller for RandomController {
    fn reset(&mut self, _: &Context, _: EnvState, _: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _: &Context, _: EnvState, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(Action::from_index(rng.random_range(0..Action::COUNT)))
    }
}
