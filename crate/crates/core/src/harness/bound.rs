use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoints::Context;
use crate::error::{Error, Result};
use crate::gridworld::{generate_task, Action, MazeTask, Pos};
use crate::oracle::{evaluate_policy, shortest_distances, OptimalPolicy};
use crate::planner::{bound_case, Perturbation};

/// Estimation accuracies swept for both values and discounts.
pub const EPS_GRID: [f64; 3] = [0.001, 0.005, 0.01];

/// Allowed ratio of observed error to the first-order bound.
pub const BOUND_SLACK: f64 = 1.5;

/// A fixed checkpoint path through a task with exact edge values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundFixture {
    pub name: String,
    pub noise: f64,
    pub task: MazeTask,
    /// Checkpoints from the start to the goal.
    pub path: Vec<Pos>,
    /// True value of each edge along the path.
    pub values: Vec<f64>,
    /// True cumulative discount of each edge along the path.
    pub discounts: Vec<f64>,
}

/// A shortest path from `start` to the goal, as cells.
pub fn shortest_path(task: &MazeTask, start: Pos) -> Result<Vec<Pos>> {
    let dist = shortest_distances(task);
    let goal = task.goal();
    let mut d = dist.between(task, start, goal);
    if !d.is_finite() {
        return Err(Error::Contract("start cannot reach the goal".into()));
    }
    let mut path = vec![start];
    let mut at = start;
    while at != goal {
        at = Action::ALL
            .iter()
            .map(|&a| task.move_from(at, a))
            .find(|&q| dist.between(task, q, goal) == d - 1.0)
            .expect("a shortest path continues");
        d -= 1.0;
        path.push(at);
    }
    Ok(path)
}

/// Every `spacing`-th cell of the shortest path from the eval spawn, ending at the goal.
pub fn checkpoint_path(task: &MazeTask, spacing: usize) -> Result<Vec<Pos>> {
    let cells = shortest_path(task, task.eval_spawn())?;
    let mut path: Vec<Pos> = cells.iter().step_by(spacing.max(1)).copied().collect();
    if path.last() != Some(&task.goal()) {
        path.push(task.goal());
    }
    Ok(path)
}

impl BoundFixture {
    /// Exact edge values of the DP-optimal low-level policy along the
    /// checkpoint path of `task`.
    pub fn new(name: &str, task: MazeTask, noise: f64, gamma: f64, gamma_intrinsic: f64) -> Result<Self> {
        let path = checkpoint_path(&task, 4)?;
        let policy = OptimalPolicy::compute(&task, noise, gamma_intrinsic);
        let ctx = Context::new(0, Arc::new(task.clone()));
        let mut values = Vec::new();
        let mut discounts = Vec::new();
        for pair in path.windows(2) {
            let e = evaluate_policy(&ctx, &policy, pair[1], gamma, noise)?;
            let from = task.index(pair[0]);
            values.push(e.value[from]);
            discounts.push(e.discount[from]);
        }
        Ok(BoundFixture {
            name: name.into(),
            noise,
            task,
            path,
            values,
            discounts,
        })
    }
}

/// The five standard fixtures: three deterministic and two noisy mazes.
pub fn standard_fixtures(gamma: f64, gamma_intrinsic: f64) -> Result<Vec<BoundFixture>> {
    let specs = [
        ("8x8-d0.40", 8, 0.40, 11, 0.0),
        ("8x8-d0.25", 8, 0.25, 12, 0.0),
        ("12x12-d0.40", 12, 0.40, 13, 0.0),
        ("8x8-d0.35-noisy", 8, 0.35, 14, 0.1),
        ("10x10-d0.30-noisy", 10, 0.30, 15, 0.1),
    ];
    specs
        .iter()
        .map(|&(name, size, difficulty, seed, noise)| {
            let task = generate_task(size, size, difficulty, seed)?;
            BoundFixture::new(name, task, noise, gamma, gamma_intrinsic)
        })
        .collect()
}

/// One perturbed evaluation of one fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub fixture: String,
    pub edges: usize,
    pub eps_v: f64,
    pub eps_gamma: f64,
    pub perturbation: Perturbation,
    pub observed: f64,
    pub bound: f64,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub slack: f64,
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn all_within(&self) -> bool {
        self.rows.iter().all(|r| r.within)
    }

    /// Largest observed-to-bound ratio.
    pub fn worst_ratio(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| if r.bound > 0.0 { r.observed / r.bound } else { 0.0 })
            .fold(0.0, f64::max)
    }
}

/// Perturbs every fixture over the accuracy grid in all three directions.
pub fn bound_sweep(fixtures: &[BoundFixture], seed: u64) -> BoundReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for f in fixtures {
        for &eps_v in &EPS_GRID {
            for &eps_gamma in &EPS_GRID {
                for p in [Perturbation::Up, Perturbation::Down, Perturbation::Random] {
                    let case = bound_case(&f.values, &f.discounts, eps_v, eps_gamma, p, &mut rng);
                    rows.push(BoundRow {
                        fixture: f.name.clone(),
                        edges: f.values.len(),
                        eps_v,
                        eps_gamma,
                        perturbation: p,
                        observed: case.observed,
                        within: case.observed <= BOUND_SLACK * case.bound,
                        bound: case.bound,
                    });
                }
            }
        }
    }
    BoundReport {
        slack: BOUND_SLACK,
        rows,
    }
}
