//! Exact dynamic-programming ground truth for a single task.
//!
//! Everything here is computed from the environment dynamics, never from
//! experience: shortest paths, optimal goal-reaching policies, and the exact
//! cumulative reward / discount / distance a given policy achieves between
//! two cells. Deterministic dynamics are evaluated by following the policy
//! chain, so closed forms such as `gamma^d` come out exact.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::checkpoints::Context;
use crate::error::{Error, Result};
use crate::gridworld::{Action, CellKind, MazeTask, Pos};
use crate::policy::GoalPolicy;

/// Systems up to this many transient states are solved directly.
pub const DIRECT_SOLVE_LIMIT: usize = 200;
pub const ITERATIVE_TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 1_000_000;

/// Reach probability this close to one counts as certain.
const CERTAIN: f64 = 1.0 - 1e-9;

/// All-pairs matrix over cells, `f64::INFINITY` for unreachable pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.n + to]
    }

    pub fn between(&self, task: &MazeTask, from: Pos, to: Pos) -> f64 {
        self.get(task.index(from), task.index(to))
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// BFS shortest path lengths. Lava cannot be entered and nothing leaves a
/// terminal cell.
pub fn shortest_distances(task: &MazeTask) -> DistanceMatrix {
    let n = task.num_cells();
    let mut data = vec![f64::INFINITY; n * n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        let row = &mut data[src * n..(src + 1) * n];
        row[src] = 0.0;
        queue.clear();
        queue.push_back(task.pos(src));
        while let Some(p) = queue.pop_front() {
            if task.is_terminal(p) {
                continue;
            }
            let d = row[task.index(p)];
            for a in Action::ALL {
                let q = task.move_from(p, a);
                let qi = task.index(q);
                if row[qi].is_infinite() && task.cell(q) != CellKind::Lava {
                    row[qi] = d + 1.0;
                    queue.push_back(q);
                }
            }
        }
    }
    DistanceMatrix { n, data }
}

/// Outcome distribution of one intended action under action noise.
fn outcomes(task: &MazeTask, p: Pos, action: Action, noise: f64) -> [(Pos, f64); 5] {
    let mut out = [(p, 0.0); 5];
    out[0] = (task.move_from(p, action), 1.0 - noise);
    for (k, a) in Action::ALL.into_iter().enumerate() {
        out[k + 1] = (task.move_from(p, a), noise / Action::COUNT as f64);
    }
    out
}

/// Goal-conditioned optimal policy for every (cell, target cell) pair.
///
/// Maximises the discounted probability of entering the target. For
/// deterministic dynamics this is exactly shortest-path following.
#[derive(Debug, Clone)]
pub struct OptimalPolicy {
    n: usize,
    /// `optimal[target * n + cell]` is a bitmask over actions.
    optimal: Vec<u8>,
}

impl OptimalPolicy {
    pub fn compute(task: &MazeTask, noise: f64, gamma: f64) -> Self {
        let n = task.num_cells();
        let mut optimal = vec![0u8; n * n];
        if noise == 0.0 {
            let dist = shortest_distances(task);
            for t in 0..n {
                for s in 0..n {
                    let p = task.pos(s);
                    let d = dist.get(s, t);
                    let mut mask = 0u8;
                    if d.is_finite() && s != t {
                        for a in Action::ALL {
                            let q = task.move_from(p, a);
                            if q != p && dist.get(task.index(q), t) + 1.0 == d {
                                mask |= 1 << a.index();
                            }
                        }
                    }
                    optimal[t * n + s] = if mask == 0 { 0b1111 } else { mask };
                }
            }
        } else {
            for t in 0..n {
                let q = reach_values(task, t, noise, gamma);
                for s in 0..n {
                    let best = q[s].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut mask = 0u8;
                    for a in 0..Action::COUNT {
                        if q[s][a] >= best - 1e-12 {
                            mask |= 1 << a;
                        }
                    }
                    optimal[t * n + s] = mask;
                }
            }
        }
        OptimalPolicy { n, optimal }
    }

    /// All optimal actions at `cell` toward `target`.
    pub fn optimal_actions(&self, task: &MazeTask, cell: Pos, target: Pos) -> Vec<Action> {
        let mask = self.optimal[task.index(target) * self.n + task.index(cell)];
        Action::ALL
            .into_iter()
            .filter(|a| mask & (1 << a.index()) != 0)
            .collect()
    }

    /// Lowest-index optimal action.
    pub fn action(&self, task: &MazeTask, cell: Pos, target: Pos) -> Action {
        let mask = self.optimal[task.index(target) * self.n + task.index(cell)];
        Action::from_index(mask.trailing_zeros() as usize)
    }
}

impl GoalPolicy for OptimalPolicy {
    fn act(&self, context: &Context, position: Pos, target: crate::gridworld::EnvState) -> Action {
        self.action(context.task(), position, target.position)
    }
}

/// Action values of the discounted reach objective toward cell `target`.
fn reach_values(task: &MazeTask, target: usize, noise: f64, gamma: f64) -> Vec<[f64; 4]> {
    let n = task.num_cells();
    let mut v = vec![0.0; n];
    let mut q = vec![[0.0; 4]; n];
    for _ in 0..MAX_ITERATIONS {
        let mut residual: f64 = 0.0;
        for s in 0..n {
            let p = task.pos(s);
            if s == target || task.is_terminal(p) {
                continue;
            }
            for a in Action::ALL {
                let mut total = 0.0;
                for (q_pos, prob) in outcomes(task, p, a, noise) {
                    let qi = task.index(q_pos);
                    total += prob
                        * if qi == target {
                            1.0
                        } else if task.is_terminal(q_pos) {
                            0.0
                        } else {
                            gamma * v[qi]
                        };
                }
                q[s][a.index()] = total;
            }
            let best = q[s].iter().cloned().fold(0.0, f64::max);
            residual = residual.max((best - v[s]).abs());
            v[s] = best;
        }
        if residual < 1e-13 {
            break;
        }
    }
    q
}

/// Exact quantities of a policy heading for one target, indexed by start cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    /// Expected discounted task reward collected before the option ends.
    pub value: Vec<f64>,
    /// `E[gamma^T 1{target reached}]`.
    pub discount: Vec<f64>,
    /// Expected steps to the target; infinite unless the target is reached
    /// almost surely.
    pub distance: Vec<f64>,
}

/// Evaluates `policy` heading for `target` under task discount `gamma`.
pub fn evaluate_policy(
    context: &Context,
    policy: &dyn GoalPolicy,
    target: Pos,
    gamma: f64,
    noise: f64,
) -> Result<PolicyEvaluation> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Contract(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let task = context.task();
    let target_state = task.state_at(target);
    let actions: Vec<Action> = (0..task.num_cells())
        .map(|s| policy.act(context, task.pos(s), target_state))
        .collect();
    if noise == 0.0 {
        Ok(evaluate_chain(task, &actions, target, gamma))
    } else {
        evaluate_linear(task, &actions, target, gamma, noise)
    }
}

fn evaluate_chain(task: &MazeTask, actions: &[Action], target: Pos, gamma: f64) -> PolicyEvaluation {
    let n = task.num_cells();
    let mut eval = PolicyEvaluation {
        value: vec![0.0; n],
        discount: vec![0.0; n],
        distance: vec![f64::INFINITY; n],
    };
    let t = task.index(target);
    for s in 0..n {
        if s == t {
            eval.discount[s] = 1.0;
            eval.distance[s] = 0.0;
            continue;
        }
        if task.is_terminal(task.pos(s)) {
            continue;
        }
        let mut p = task.pos(s);
        // A deterministic chain that has not ended within n steps is cycling.
        for d in 1..=n as i32 {
            let q = task.move_from(p, actions[task.index(p)]);
            let reward = if task.cell(q) == CellKind::Goal { 1.0 } else { 0.0 };
            if q == target {
                eval.value[s] = reward * gamma.powi(d - 1);
                eval.discount[s] = gamma.powi(d);
                eval.distance[s] = d as f64;
                break;
            }
            if task.is_terminal(q) {
                eval.value[s] = reward * gamma.powi(d - 1);
                break;
            }
            p = q;
        }
    }
    eval
}

fn evaluate_linear(
    task: &MazeTask,
    actions: &[Action],
    target: Pos,
    gamma: f64,
    noise: f64,
) -> Result<PolicyEvaluation> {
    let n = task.num_cells();
    let t = task.index(target);
    // Transient states: non-terminal cells other than the target.
    let transient: Vec<usize> = (0..n)
        .filter(|&s| s != t && !task.is_terminal(task.pos(s)))
        .collect();
    let mut slot = vec![usize::MAX; n];
    for (k, &s) in transient.iter().enumerate() {
        slot[s] = k;
    }
    let m = transient.len();

    // Sparse rows: (successor slot, prob) among transient states, plus exits.
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    let mut to_target = vec![0.0; m];
    let mut reward = vec![0.0; m];
    let mut stay_mass = vec![0.0; m];
    for (k, &s) in transient.iter().enumerate() {
        for (q, prob) in outcomes(task, task.pos(s), actions[s], noise) {
            if prob == 0.0 {
                continue;
            }
            let qi = task.index(q);
            if task.cell(q) == CellKind::Goal {
                reward[k] += prob;
            }
            if qi == t {
                to_target[k] += prob;
            } else if slot[qi] != usize::MAX {
                rows[k].push((slot[qi], prob));
                stay_mass[k] += prob;
            }
        }
    }

    // States that can never leave the transient set keep every quantity at
    // zero; dropping them keeps the undiscounted system nonsingular.
    let live = live_states(&rows, &stay_mass);

    let value = solve(&rows, &live, &reward, gamma)?;
    let discount_b: Vec<f64> = to_target.iter().map(|p| gamma * p).collect();
    let discount = solve(&rows, &live, &discount_b, gamma)?;
    let reach = if gamma == 1.0 {
        discount.clone()
    } else {
        solve(&rows, &live, &to_target, 1.0)?
    };

    // Expected length over states that reach the target almost surely.
    let sure: Vec<bool> = (0..m).map(|k| live[k] && reach[k] >= CERTAIN).collect();
    let ones: Vec<f64> = (0..m).map(|k| if sure[k] { 1.0 } else { 0.0 }).collect();
    let steps = solve(&rows, &sure, &ones, 1.0)?;

    let mut eval = PolicyEvaluation {
        value: vec![0.0; n],
        discount: vec![0.0; n],
        distance: vec![f64::INFINITY; n],
    };
    eval.discount[t] = 1.0;
    eval.distance[t] = 0.0;
    for (k, &s) in transient.iter().enumerate() {
        eval.value[s] = value[k];
        eval.discount[s] = discount[k];
        if sure[k] {
            eval.distance[s] = steps[k];
        }
    }
    Ok(eval)
}

fn live_states(rows: &[Vec<(usize, f64)>], stay_mass: &[f64]) -> Vec<bool> {
    let m = rows.len();
    let mut predecessors: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (k, row) in rows.iter().enumerate() {
        for &(j, _) in row {
            predecessors[j].push(k);
        }
    }
    let mut live: Vec<bool> = stay_mass.iter().map(|&s| s < 1.0 - 1e-15).collect();
    let mut queue: VecDeque<usize> = (0..m).filter(|&k| live[k]).collect();
    while let Some(j) = queue.pop_front() {
        for &k in &predecessors[j] {
            if !live[k] {
                live[k] = true;
                queue.push_back(k);
            }
        }
    }
    live
}

/// Solves `x = b + gamma * P x` over the states flagged in `active`; other
/// states are fixed at zero.
fn solve(rows: &[Vec<(usize, f64)>], active: &[bool], b: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..rows.len()).filter(|&k| active[k]).collect();
    let mut local = vec![usize::MAX; rows.len()];
    for (i, &k) in idx.iter().enumerate() {
        local[k] = i;
    }
    let m = idx.len();
    let mut x = vec![0.0; rows.len()];
    if m == 0 {
        return Ok(x);
    }
    if m <= DIRECT_SOLVE_LIMIT {
        let mut a = DMatrix::<f64>::identity(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for (i, &k) in idx.iter().enumerate() {
            rhs[i] = b[k];
            for &(j, p) in &rows[k] {
                if local[j] != usize::MAX {
                    a[(i, local[j])] -= gamma * p;
                }
            }
        }
        let sol = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Contract("singular policy-evaluation system".into()))?;
        for (i, &k) in idx.iter().enumerate() {
            x[k] = sol[i];
        }
        return Ok(x);
    }
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        residual = 0.0;
        for &k in &idx {
            let mut v = b[k];
            for &(j, p) in &rows[k] {
                if active[j] {
                    v += gamma * p * x[j];
                }
            }
            residual = residual.max((v - x[k]).abs());
            x[k] = v;
        }
        if residual < ITERATIVE_TOLERANCE {
            return Ok(x);
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITERATIONS,
        residual,
    })
}

/// Exact distribution of the steps needed to reach `target` from `start`:
/// `probs[d - 1] = P(D = d)` for `d = 1..=max_steps`.
///
/// The mass missing from the sum is the probability of not having reached
/// the target within `max_steps` (including never).
pub fn distance_distribution(
    context: &Context,
    policy: &dyn GoalPolicy,
    start: Pos,
    target: Pos,
    noise: f64,
    max_steps: usize,
) -> Vec<f64> {
    let task = context.task();
    let target_state = task.state_at(target);
    let n = task.num_cells();
    let t = task.index(target);
    let mut mass = vec![0.0; n];
    mass[task.index(start)] = 1.0;
    let mut out = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        let mut next = vec![0.0; n];
        let mut arrived = 0.0;
        for s in 0..n {
            if mass[s] == 0.0 {
                continue;
            }
            let p = task.pos(s);
            let a = policy.act(context, p, target_state);
            for (q, prob) in outcomes(task, p, a, noise) {
                let qi = task.index(q);
                if qi == t {
                    arrived += mass[s] * prob;
                } else if !task.is_terminal(q) {
                    next[qi] += mass[s] * prob;
                }
            }
        }
        out.push(arrived);
        mass = next;
    }
    out
}

/// Discount that orders checkpoint targets of equal success probability,
/// so the exact plan always makes progress.
const PLAN_TIE_GAMMA: f64 = 0.99;

/// Low-level controller used by [`composite_success_rate`].
pub enum LowLevel<'a> {
    /// DP-optimal goal-reaching policy (discounted by `gamma_intrinsic`).
    Optimal { gamma_intrinsic: f64 },
    Learned(&'a dyn GoalPolicy),
}

/// An exact high-level plan over every non-lava cell.
#[derive(Debug, Clone)]
pub struct OraclePlan {
    /// Success probability from each cell.
    pub values: Vec<f64>,
    /// Next checkpoint target chosen at each cell, `None` where nothing helps.
    pub choice: Vec<Option<Pos>>,
}

impl OraclePlan {
    pub fn next_target(&self, task: &MazeTask, at: Pos) -> Option<Pos> {
        self.choice[task.index(at)]
    }
}

/// Solves the checkpoint-level problem exactly for a fixed low-level policy.
///
/// Every non-lava cell is a candidate checkpoint; an edge `i -> j` carries the
/// undiscounted probability of reaching `j` and of entering the goal on the
/// way. Value iteration runs from zero to convergence. Among targets with
/// the best success probability the plan takes the one with the highest
/// discounted value.
pub fn oracle_plan(context: &Context, noise: f64, low: &LowLevel<'_>) -> Result<OraclePlan> {
    let task = context.task();
    let n = task.num_cells();
    let optimal;
    let policy: &dyn GoalPolicy = match low {
        LowLevel::Optimal { gamma_intrinsic } => {
            optimal = OptimalPolicy::compute(task, noise, *gamma_intrinsic);
            &optimal
        }
        LowLevel::Learned(p) => *p,
    };
    let vertices: Vec<usize> = (0..n)
        .filter(|&s| task.cells()[s] != CellKind::Lava)
        .collect();
    // Per target vertex: undiscounted evaluation, and a discounted one used
    // only to order targets of equal success probability.
    let mut edges = Vec::with_capacity(vertices.len());
    let mut discounted = Vec::with_capacity(vertices.len());
    for &j in &vertices {
        edges.push(evaluate_policy(context, policy, task.pos(j), 1.0, noise)?);
        discounted.push(evaluate_policy(context, policy, task.pos(j), PLAN_TIE_GAMMA, noise)?);
    }
    let goal = task.index(task.goal());
    let sweep = |values: &mut Vec<f64>, allowed: &dyn Fn(usize, usize) -> bool, table: &[PolicyEvaluation]| {
        for _ in 0..100_000 {
            let mut change: f64 = 0.0;
            for &i in &vertices {
                if i == goal {
                    continue;
                }
                let mut best: f64 = 0.0;
                for (e, &j) in table.iter().zip(&vertices) {
                    if j != i && allowed(i, j) {
                        best = best.max(e.value[i] + e.discount[i] * values[j]);
                    }
                }
                change = change.max((best - values[i]).abs());
                values[i] = best;
            }
            if change < 1e-14 {
                break;
            }
        }
    };
    let mut values = vec![0.0; n];
    sweep(&mut values, &|_, _| true, &edges);
    // Targets that attain the success probability of their source.
    let optimal_step = |i: usize, j: usize| {
        let k = vertices.binary_search(&j).expect("vertex");
        edges[k].value[i] + edges[k].discount[i] * values[j] >= values[i] - 1e-12
    };
    let mut tie = vec![0.0; n];
    sweep(&mut tie, &optimal_step, &discounted);
    let mut choice = vec![None; n];
    for &i in &vertices {
        if i == goal || values[i] <= 0.0 {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        for (k, &j) in vertices.iter().enumerate() {
            if j == i || !optimal_step(i, j) {
                continue;
            }
            let q = discounted[k].value[i] + discounted[k].discount[i] * tie[j];
            if q > best + 1e-12 {
                best = q;
                choice[i] = Some(task.pos(j));
            }
        }
    }
    Ok(OraclePlan { values, choice })
}

/// Success probability from the evaluation spawn of the composite agent.
///
/// `plan_oracle` selects the exact checkpoint plan; otherwise the agent
/// heads straight for the goal.
pub fn composite_success_rate(
    context: &Context,
    noise: f64,
    plan_oracle: bool,
    low: LowLevel<'_>,
) -> Result<f64> {
    let task = context.task();
    let spawn = task.eval_spawn();
    if plan_oracle {
        let plan = oracle_plan(context, noise, &low)?;
        return Ok(plan.values[task.index(spawn)]);
    }
    let optimal;
    let policy: &dyn GoalPolicy = match low {
        LowLevel::Optimal { gamma_intrinsic } => {
            optimal = OptimalPolicy::compute(task, noise, gamma_intrinsic);
            &optimal
        }
        LowLevel::Learned(p) => p,
    };
    let eval = evaluate_policy(context, policy, task.goal(), 1.0, noise)?;
    Ok(eval.value[task.index(spawn)])
}

/// Success probability with both the plan and the policy replaced by their
/// DP-optimal versions.
pub fn optimal_success_rate(context: &Context, noise: f64, gamma_intrinsic: f64) -> Result<f64> {
    composite_success_rate(context, noise, true, LowLevel::Optimal { gamma_intrinsic })
}

/// Ground-truth tables for one task, exportable as JSON fixtures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleTables {
    pub task: MazeTask,
    pub gamma: f64,
    pub noise: f64,
    /// `optimal_distance[from][to]`, `None` when unreachable.
    pub optimal_distance: Vec<Vec<Option<f64>>>,
    /// `optimal_policy[target][cell]` as the lowest-index optimal action.
    pub optimal_policy: Vec<Vec<Action>>,
    /// Cumulative discount of the optimal policy, `[from][to]`.
    pub true_gamma: Vec<Vec<f64>>,
    /// Cumulative task reward of the optimal policy, `[from][to]`.
    pub true_value: Vec<Vec<f64>>,
    /// Expected steps of the optimal policy, `None` when not almost sure.
    pub true_distance: Vec<Vec<Option<f64>>>,
}

impl OracleTables {
    pub fn compute(context: &Context, gamma: f64, noise: f64, gamma_intrinsic: f64) -> Result<Self> {
        let task = context.task();
        let n = task.num_cells();
        let dist = shortest_distances(task);
        let policy = OptimalPolicy::compute(task, noise, gamma_intrinsic);
        let finite = |d: f64| d.is_finite().then_some(d);
        let mut true_gamma = vec![vec![0.0; n]; n];
        let mut true_value = vec![vec![0.0; n]; n];
        let mut true_distance = vec![vec![None; n]; n];
        for t in 0..n {
            let target = task.pos(t);
            if task.cell(target) == CellKind::Lava {
                for s in 0..n {
                    true_distance[s][t] = (s == t).then_some(0.0);
                }
                continue;
            }
            let e = evaluate_policy(context, &policy, target, gamma, noise)?;
            for s in 0..n {
                true_gamma[s][t] = e.discount[s];
                true_value[s][t] = e.value[s];
                true_distance[s][t] = finite(e.distance[s]);
            }
        }
        Ok(OracleTables {
            task: task.clone(),
            gamma,
            noise,
            optimal_distance: (0..n)
                .map(|s| (0..n).map(|t| finite(dist.get(s, t))).collect())
                .collect(),
            optimal_policy: (0..n)
                .map(|t| {
                    (0..n)
                        .map(|s| policy.action(task, task.pos(s), task.pos(t)))
                        .collect()
                })
                .collect(),
            true_gamma,
            true_value,
            true_distance,
        })
    }
}
