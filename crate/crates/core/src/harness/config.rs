use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::estimators::Abstraction;
use crate::gridworld::{generate_task, MazeTask};
use crate::planner::ReplanMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentKind {
    SkipperOnce,
    SkipperRegen,
    Modelfree,
    SkipperGoal,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [
        AgentKind::SkipperOnce,
        AgentKind::SkipperRegen,
        AgentKind::Modelfree,
        AgentKind::SkipperGoal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::SkipperOnce => "SkipperOnce",
            AgentKind::SkipperRegen => "SkipperRegen",
            AgentKind::Modelfree => "Modelfree",
            AgentKind::SkipperGoal => "SkipperGoal",
        }
    }

    /// Replanning mode for agents that build proxy problems.
    pub fn replan_mode(self) -> Option<ReplanMode> {
        match self {
            AgentKind::SkipperOnce => Some(ReplanMode::Once),
            AgentKind::SkipperRegen => Some(ReplanMode::Regen),
            AgentKind::Modelfree | AgentKind::SkipperGoal => None,
        }
    }

    pub fn default_abstraction(self) -> Abstraction {
        match self {
            AgentKind::Modelfree => Abstraction::Identity,
            _ => Abstraction::WideField,
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    /// Case-insensitive; `-` and `_` are ignored, so `skipper-once` works.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .flat_map(char::to_lowercase)
            .collect();
        AgentKind::ALL
            .into_iter()
            .find(|a| a.name().to_lowercase() == key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown agent {s:?}")))
    }
}

/// Number of training tasks: a fixed set, or a fresh task every episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTasks {
    Fixed(usize),
    Fresh,
}

impl Serialize for TrainTasks {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TrainTasks::Fixed(n) => s.serialize_u64(*n as u64),
            TrainTasks::Fresh => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for TrainTasks {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(TrainTasks::Fixed(n)),
            Raw::Word(w) if matches!(w.as_str(), "inf" | "infinite" | "fresh") => Ok(TrainTasks::Fresh),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("expected a count or \"inf\", got {w:?}"))),
        }
    }
}

/// Everything one experiment needs. Read from a flat JSON or TOML file;
/// missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub width: usize,
    pub height: usize,
    pub train_difficulty: f64,
    pub eval_difficulties: Vec<f64>,
    pub num_train_tasks: TrainTasks,
    pub total_interactions: u64,
    pub n_generate: usize,
    pub k_prune: usize,
    pub vi_iterations: usize,
    pub edge_threshold: f64,
    pub replan_interval: usize,
    pub her_k: usize,
    pub gamma_task: f64,
    pub gamma_intrinsic: f64,
    pub noise: f64,
    pub agent: AgentKind,
    /// Defaults per agent when absent.
    pub abstraction: Option<Abstraction>,
    pub delusion_suppression: bool,
    pub suppression_scale: f64,
    pub include_invalid: bool,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub eval_tasks_per_difficulty: usize,
    /// Evaluation cadence as a fraction of `total_interactions`.
    pub eval_every: f64,
    pub learning_rate: f64,
    pub train_every: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            width: 8,
            height: 8,
            train_difficulty: 0.4,
            eval_difficulties: vec![0.25, 0.35, 0.45, 0.55],
            num_train_tasks: TrainTasks::Fixed(25),
            total_interactions: 200_000,
            n_generate: 32,
            k_prune: 12,
            vi_iterations: 5,
            edge_threshold: 8.0,
            replan_interval: 8,
            her_k: 4,
            gamma_task: 0.99,
            gamma_intrinsic: 0.95,
            noise: 0.0,
            agent: AgentKind::SkipperOnce,
            abstraction: None,
            delusion_suppression: false,
            suppression_scale: 0.25,
            include_invalid: false,
            master_seed: 0,
            seeds: (0..5).collect(),
            eval_episodes: 20,
            eval_tasks_per_difficulty: 20,
            eval_every: 0.05,
            learning_rate: 0.1,
            train_every: 4,
            batch_size: 64,
            buffer_capacity: 100_000,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_fraction: 0.5,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(msg()))
    }
}

fn probability(name: &str, p: f64) -> Result<()> {
    check((0.0..=1.0).contains(&p), || format!("{name} must lie in [0, 1], got {p}"))
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?,
            _ => serde_json::from_str(&text).map_err(|e| Error::json(path, e))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn abstraction(&self) -> Abstraction {
        self.abstraction
            .unwrap_or_else(|| self.agent.default_abstraction())
    }

    pub fn validate(&self) -> Result<()> {
        check(self.width >= 2 && self.height >= 2, || {
            format!("grid must be at least 2x2, got {}x{}", self.width, self.height)
        })?;
        check(self.width * self.height <= 4096, || "grid has more than 4096 cells".into())?;
        check((0.0..1.0).contains(&self.train_difficulty), || {
            format!("train_difficulty must lie in [0, 1), got {}", self.train_difficulty)
        })?;
        for &d in &self.eval_difficulties {
            check((0.0..1.0).contains(&d), || format!("eval difficulty must lie in [0, 1), got {d}"))?;
        }
        check(self.num_train_tasks != TrainTasks::Fixed(0), || "num_train_tasks must be positive".into())?;
        check(self.total_interactions > 0, || "total_interactions must be positive".into())?;
        check(self.n_generate >= 2, || "n_generate must be at least 2".into())?;
        check(self.k_prune >= 1 && self.k_prune <= self.n_generate, || {
            format!("k_prune must lie in [1, n_generate = {}], got {}", self.n_generate, self.k_prune)
        })?;
        check(self.vi_iterations >= 1, || "vi_iterations must be at least 1".into())?;
        check(self.edge_threshold > 0.0, || "edge_threshold must be positive".into())?;
        check(self.replan_interval >= 1, || "replan_interval must be at least 1".into())?;
        check(self.her_k >= 1, || "her_k must be at least 1".into())?;
        for (name, g) in [("gamma_task", self.gamma_task), ("gamma_intrinsic", self.gamma_intrinsic)] {
            check(g > 0.0 && g < 1.0, || format!("{name} must lie in (0, 1), got {g}"))?;
        }
        probability("noise", self.noise)?;
        probability("suppression_scale", self.suppression_scale)?;
        probability("epsilon_start", self.epsilon_start)?;
        probability("epsilon_end", self.epsilon_end)?;
        probability("epsilon_fraction", self.epsilon_fraction)?;
        check(self.learning_rate > 0.0 && self.learning_rate <= 1.0, || {
            format!("learning_rate must lie in (0, 1], got {}", self.learning_rate)
        })?;
        check(!self.seeds.is_empty(), || "seeds must not be empty".into())?;
        check(self.eval_episodes >= 1, || "eval_episodes must be at least 1".into())?;
        check(self.eval_tasks_per_difficulty >= 1, || "eval_tasks_per_difficulty must be at least 1".into())?;
        check(self.eval_every > 0.0 && self.eval_every <= 1.0, || {
            format!("eval_every must lie in (0, 1], got {}", self.eval_every)
        })?;
        check(self.train_every >= 1, || "train_every must be at least 1".into())?;
        check(self.batch_size >= 1, || "batch_size must be at least 1".into())?;
        check(self.buffer_capacity >= 1, || "buffer_capacity must be at least 1".into())?;
        Ok(())
    }

    /// Interaction counts at which evaluation runs.
    pub fn eval_points(&self) -> Vec<u64> {
        let step = ((self.eval_every * self.total_interactions as f64).round() as u64).max(1);
        let mut points: Vec<u64> = (1..)
            .map(|k| k * step)
            .take_while(|&t| t < self.total_interactions)
            .collect();
        points.push(self.total_interactions);
        points
    }

    /// Fixed training tasks of run `seed`; empty in fresh-task mode.
    pub fn train_tasks(&self, seed: u64) -> Result<Vec<MazeTask>> {
        match self.num_train_tasks {
            TrainTasks::Fixed(n) => {
                let mut rng = stream(self.master_seed, 1 + seed);
                (0..n)
                    .map(|_| generate_task(self.width, self.height, self.train_difficulty, rng.random()))
                    .collect()
            }
            TrainTasks::Fresh => Ok(Vec::new()),
        }
    }

    /// Seed source for fresh training tasks of run `seed`.
    pub fn fresh_task_rng(&self, seed: u64) -> ChaCha8Rng {
        stream(self.master_seed, (1 << 40) + seed)
    }

    /// Held-out tasks at `difficulty`. Depends on the master seed only, so
    /// every run and every agent sees the same evaluation set.
    pub fn eval_tasks(&self, difficulty: f64) -> Result<Vec<MazeTask>> {
        let mut rng = stream(self.master_seed, (2 << 40) + difficulty.to_bits());
        (0..self.eval_tasks_per_difficulty)
            .map(|_| generate_task(self.width, self.height, difficulty, rng.random()))
            .collect()
    }
}

/// An independent ChaCha stream under `master`.
pub fn stream(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}
