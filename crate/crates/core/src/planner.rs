//! Proxy problems: edge matrices over checkpoints, SMDP value iteration and
//! target selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoints::Context;
use crate::error::{Error, Result};
use crate::estimators::{EdgeEstimate, EdgeEstimatorTables, GoalConditionedQ};
use crate::gridworld::EnvState;

/// A vertex whose terminal probability exceeds this has no outgoing edges.
pub const TERMINAL_THRESHOLD: f64 = 0.5;
const TIE: f64 = 1e-12;

/// Anything that can estimate an edge between two checkpoints.
pub trait EdgeSource {
    fn edge(&self, from: EnvState, to: EnvState) -> EdgeEstimate;
}

/// Edge estimates read from learned tables.
pub struct Learned<'a> {
    pub context: &'a Context,
    pub policy: &'a GoalConditionedQ,
    pub tables: &'a EdgeEstimatorTables,
    pub truncation: f64,
}

impl EdgeSource for Learned<'_> {
    fn edge(&self, from: EnvState, to: EnvState) -> EdgeEstimate {
        self.tables
            .estimate_edge(self.policy, self.context, from, to, self.truncation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyGraph {
    /// Vertex 0 is the current state.
    pub vertices: Vec<EnvState>,
    /// Cumulative reward `R[i][j]`.
    pub reward: Vec<Vec<f64>>,
    /// Cumulative discount `G[i][j]`.
    pub discount: Vec<Vec<f64>>,
    /// Estimated distance, kept for every pair including pruned ones.
    pub distance: Vec<Vec<f64>>,
    pub terminal: Vec<f64>,
    /// Edges that survived pruning.
    pub alive: Vec<Vec<bool>>,
    pub threshold: f64,
    /// Raw reward and discount before pruning.
    raw_reward: Vec<Vec<f64>>,
    raw_discount: Vec<Vec<f64>>,
}

impl ProxyGraph {
    /// Builds a graph from raw matrices and applies the pruning rules.
    pub fn from_matrices(
        vertices: Vec<EnvState>,
        reward: Vec<Vec<f64>>,
        discount: Vec<Vec<f64>>,
        distance: Vec<Vec<f64>>,
        terminal: Vec<f64>,
        threshold: f64,
    ) -> Result<Self> {
        let n = vertices.len();
        let square = |m: &Vec<Vec<f64>>| m.len() == n && m.iter().all(|r| r.len() == n);
        if !(square(&reward) && square(&discount) && square(&distance) && terminal.len() == n) {
            return Err(Error::Contract("proxy graph matrices must be square over the vertices".into()));
        }
        if discount.iter().flatten().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::Contract("discounts must lie in [0, 1]".into()));
        }
        let mut graph = ProxyGraph {
            vertices,
            reward: reward.clone(),
            discount: discount.clone(),
            distance,
            terminal,
            alive: vec![vec![false; n]; n],
            threshold,
            raw_reward: reward,
            raw_discount: discount,
        };
        graph.prune();
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    fn prune(&mut self) {
        let n = self.len();
        let here = self.vertices.first().map(|v| v.position);
        for i in 0..n {
            for j in 0..n {
                let keep = i != j
                    && j != 0
                    && Some(self.vertices[j].position) != here
                    && self.terminal[i] <= TERMINAL_THRESHOLD
                    && self.distance[i][j] <= self.threshold;
                self.alive[i][j] = keep;
                let (r, g) = if keep {
                    (self.raw_reward[i][j], self.raw_discount[i][j])
                } else {
                    (0.0, 0.0)
                };
                self.reward[i][j] = r;
                self.discount[i][j] = g;
            }
        }
    }

    /// Replaces vertex 0 with `current`, re-estimates its outgoing edges and
    /// reapplies pruning. Other edges are kept as they were.
    pub fn rebind(&mut self, current: EnvState, source: &dyn EdgeSource) {
        self.vertices[0] = current;
        let first = source.edge(current, current);
        self.terminal[0] = first.terminal_from;
        for j in 1..self.len() {
            let e = source.edge(current, self.vertices[j]);
            self.raw_reward[0][j] = e.value;
            self.raw_discount[0][j] = e.gamma;
            self.distance[0][j] = e.distance;
        }
        self.prune();
    }
}

/// Fills every ordered pair from `source`, then prunes self-loops, edges
/// into the current state, edges out of terminal vertices and edges longer
/// than `threshold`.
pub fn build_graph(vertices: Vec<EnvState>, source: &dyn EdgeSource, threshold: f64) -> Result<ProxyGraph> {
    let n = vertices.len();
    let mut reward = vec![vec![0.0; n]; n];
    let mut discount = vec![vec![0.0; n]; n];
    let mut distance = vec![vec![0.0; n]; n];
    let mut terminal = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let e = source.edge(vertices[i], vertices[j]);
            if i == j {
                terminal[i] = e.terminal_from;
                continue;
            }
            reward[i][j] = e.value;
            discount[i][j] = e.gamma;
            distance[i][j] = e.distance;
        }
    }
    ProxyGraph::from_matrices(vertices, reward, discount, distance, terminal, threshold)
}

/// `iterations` sweeps of `Q = R + G V`, `V = max_j Q`, starting from zero.
pub fn value_iterate(graph: &ProxyGraph, iterations: usize) -> Result<Vec<f64>> {
    if iterations == 0 {
        return Err(Error::Contract("value iteration needs at least one sweep".into()));
    }
    let n = graph.len();
    let mut v = vec![0.0; n];
    for _ in 0..iterations {
        v = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| graph.reward[i][j] + graph.discount[i][j] * v[j])
                    .fold(0.0, f64::max)
            })
            .collect();
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub checkpoint_values: Vec<f64>,
    /// Immediate target, never vertex 0.
    pub target: usize,
    /// True when no edge out of vertex 0 survived and the nearest vertex was
    /// taken instead.
    pub fallback: bool,
}

/// Picks the target maximising `R[0][j] + G[0][j] V[j]` over surviving edges,
/// breaking ties by distance then index.
pub fn select_target(graph: &ProxyGraph, values: &[f64]) -> Result<Plan> {
    let n = graph.len();
    if n < 2 {
        return Err(Error::Contract("a proxy graph needs at least two vertices".into()));
    }
    let mut best: Option<(f64, f64, usize)> = None;
    for j in (1..n).filter(|&j| graph.alive[0][j]) {
        let score = graph.reward[0][j] + graph.discount[0][j] * values[j];
        let d = graph.distance[0][j];
        let better = match best {
            None => true,
            Some((s, bd, _)) => score > s + TIE || ((score - s).abs() <= TIE && d < bd),
        };
        if better {
            best = Some((score, d, j));
        }
    }
    if let Some((_, _, target)) = best {
        return Ok(Plan {
            checkpoint_values: values.to_vec(),
            target,
            fallback: false,
        });
    }
    let here = graph.vertices[0].position;
    let candidates: Vec<usize> = (1..n).filter(|&j| graph.vertices[j].position != here).collect();
    let pool = if candidates.is_empty() {
        (1..n).collect()
    } else {
        candidates
    };
    let target = pool
        .into_iter()
        .min_by(|&a, &b| graph.distance[0][a].total_cmp(&graph.distance[0][b]))
        .expect("at least one other vertex");
    Ok(Plan {
        checkpoint_values: values.to_vec(),
        target,
        fallback: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplanMode {
    Once,
    Regen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplanEvent {
    EpisodeStart,
    CheckpointReached,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplanAction {
    RebuildGraphAndPlan,
    ReplanOnExistingGraph,
}

pub fn replan_policy(mode: ReplanMode, event: ReplanEvent) -> ReplanAction {
    match (mode, event) {
        (_, ReplanEvent::EpisodeStart) | (ReplanMode::Regen, _) => ReplanAction::RebuildGraphAndPlan,
        (ReplanMode::Once, _) => ReplanAction::ReplanOnExistingGraph,
    }
}

/// Composite value along a fixed checkpoint path,
/// `sum_k v_k prod_{l<k} g_l`, truncated after `MAX_PATH_TERMS` edges.
pub fn composite_value(values: &[f64], discounts: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut carry = 1.0;
    for (v, g) in values.iter().zip(discounts).take(MAX_PATH_TERMS) {
        total += v * carry;
        carry *= g;
    }
    total
}

pub const MAX_PATH_TERMS: usize = 50;

/// First-order error bound on [`composite_value`] when every value is off by
/// at most `eps_v * v_max` and every discount by at most `eps_gamma`, with
/// all true discounts at most `gamma`.
pub fn composite_error_bound(eps_v: f64, eps_gamma: f64, v_max: f64, gamma: f64) -> f64 {
    eps_v * v_max / (1.0 - gamma) + eps_gamma * v_max / (1.0 - gamma).powi(2)
}

/// How estimates are perturbed in a bound check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    Up,
    Down,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCase {
    pub eps_v: f64,
    pub eps_gamma: f64,
    pub perturbation: Perturbation,
    pub observed: f64,
    pub bound: f64,
}

/// Perturbs exact path values and discounts within the given accuracy and
/// reports the composite-value error against the bound.
pub fn bound_case<R: Rng + ?Sized>(
    values: &[f64],
    discounts: &[f64],
    eps_v: f64,
    eps_gamma: f64,
    perturbation: Perturbation,
    rng: &mut R,
) -> BoundCase {
    let exact = composite_value(values, discounts);
    let v_max = suffix_values(values, discounts)
        .into_iter()
        .fold(0.0, f64::max);
    let gamma = discounts.iter().cloned().fold(0.0, f64::max);
    let sign = |rng: &mut R| match perturbation {
        Perturbation::Up => 1.0,
        Perturbation::Down => -1.0,
        Perturbation::Random => rng.random_range(-1.0..=1.0),
    };
    let v_hat: Vec<f64> = values.iter().map(|v| v + sign(rng) * eps_v * v_max).collect();
    let g_hat: Vec<f64> = discounts.iter().map(|g| g + sign(rng) * eps_gamma).collect();
    BoundCase {
        eps_v,
        eps_gamma,
        perturbation,
        observed: (composite_value(&v_hat, &g_hat) - exact).abs(),
        bound: composite_error_bound(eps_v, eps_gamma, v_max, gamma),
    }
}

/// Composite value from each checkpoint of the path onward.
pub fn suffix_values(values: &[f64], discounts: &[f64]) -> Vec<f64> {
    (0..values.len())
        .map(|k| composite_value(&values[k..], &discounts[k..]))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gridworld::Pos;

    fn states(n: usize) -> Vec<EnvState> {
        (0..n).map(|x| EnvState::alive(Pos::new(x, 0))).collect()
    }

    fn graph(r: Vec<Vec<f64>>, g: Vec<Vec<f64>>, d: Vec<Vec<f64>>) -> ProxyGraph {
        let n = r.len();
        ProxyGraph::from_matrices(states(n), r, g, d, vec![0.0; n], 8.0).unwrap()
    }

    /// current -> A -> goal with a single rewarding edge.
    fn chain(d_current_goal: f64) -> ProxyGraph {
        let r = vec![vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0; 3]];
        let g = vec![vec![0.0, 0.9, 0.5], vec![0.0, 0.0, 0.8], vec![0.0; 3]];
        let d = vec![vec![0.0, 3.0, d_current_goal], vec![3.0, 0.0, 4.0], vec![1.0; 3]];
        graph(r, g, d)
    }

    #[test]
    fn chain_values_by_hand() {
        let gr = chain(12.0);
        let v = value_iterate(&gr, 2).unwrap();
        assert_eq!(v[1], 1.0);
        assert!((v[0] - 0.9).abs() < 1e-15);
        assert_eq!(select_target(&gr, &v).unwrap().target, 1);
        // With the goal in range the direct edge is still worse: 0.5 < 0.9.
        let gr = chain(6.0);
        let v = value_iterate(&gr, 5).unwrap();
        assert_eq!(select_target(&gr, &v).unwrap().target, 1);
    }

    #[test]
    fn zero_graph_stays_zero() {
        let z = vec![vec![0.0; 4]; 4];
        let gr = graph(z.clone(), z.clone(), z);
        assert_eq!(value_iterate(&gr, 5).unwrap(), vec![0.0; 4]);
        assert!(value_iterate(&gr, 0).is_err());
    }

    #[test]
    fn pruning_rules() {
        let n = 3;
        let full = vec![vec![0.5; n]; n];
        let d = vec![vec![9.0, 2.0, 2.0], vec![2.0, 9.0, 2.0], vec![2.0, 2.0, 2.0]];
        let gr = ProxyGraph::from_matrices(states(n), full.clone(), full, d, vec![0.0, 0.0, 0.9], 8.0).unwrap();
        for i in 0..n {
            assert_eq!(gr.reward[i][i], 0.0);
            assert_eq!(gr.discount[i][0], 0.0);
        }
        assert_eq!(gr.discount[2], vec![0.0; 3]);
        assert_eq!(gr.discount[0][1], 0.5);
        assert_eq!(gr.discount[1][2], 0.5);
    }

    #[test]
    fn all_far_falls_back_to_nearest() {
        let r = vec![vec![0.0, 0.0, 1.0], vec![0.0; 3], vec![0.0; 3]];
        let g = vec![vec![0.0, 0.1, 0.1], vec![0.0; 3], vec![0.0; 3]];
        let d = vec![vec![0.0, 12.0, 10.0], vec![0.0; 3], vec![0.0; 3]];
        let gr = graph(r, g, d);
        assert!(gr.reward[0].iter().chain(&gr.discount[0]).all(|&x| x == 0.0));
        let plan = select_target(&gr, &value_iterate(&gr, 5).unwrap()).unwrap();
        assert_eq!((plan.target, plan.fallback), (2, true));
    }

    #[test]
    fn two_vertex_graph_targets_goal() {
        let r = vec![vec![0.0, 0.97], vec![0.0, 0.0]];
        let g = vec![vec![0.0, 0.99f64.powi(3)], vec![0.0, 0.0]];
        let d = vec![vec![0.0, 3.0], vec![1.0, 0.0]];
        let gr = graph(r, g, d);
        let plan = select_target(&gr, &value_iterate(&gr, 5).unwrap()).unwrap();
        assert_eq!((plan.target, plan.fallback), (1, false));
        let single = graph(vec![vec![0.0]], vec![vec![0.0]], vec![vec![0.0]]);
        assert!(select_target(&single, &[0.0]).is_err());
    }

    #[test]
    fn ties_prefer_shorter_then_lower_index() {
        let r = vec![vec![0.0, 0.5, 0.5, 0.5], vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]];
        let g = vec![vec![0.0; 4]; 4];
        let d = vec![vec![0.0, 5.0, 3.0, 3.0], vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]];
        let gr = graph(r, g, d);
        assert_eq!(select_target(&gr, &[0.0; 4]).unwrap().target, 2);
    }

    #[test]
    fn replanning_table() {
        use ReplanAction::*;
        use ReplanEvent::*;
        assert_eq!(replan_policy(ReplanMode::Once, Timeout), ReplanOnExistingGraph);
        assert_eq!(replan_policy(ReplanMode::Once, CheckpointReached), ReplanOnExistingGraph);
        assert_eq!(replan_policy(ReplanMode::Regen, CheckpointReached), RebuildGraphAndPlan);
        assert_eq!(replan_policy(ReplanMode::Regen, Timeout), RebuildGraphAndPlan);
        for mode in [ReplanMode::Once, ReplanMode::Regen] {
            assert_eq!(replan_policy(mode, EpisodeStart), RebuildGraphAndPlan);
        }
    }

    struct Table(Vec<Vec<f64>>);

    impl EdgeSource for Table {
        fn edge(&self, from: EnvState, to: EnvState) -> EdgeEstimate {
            let d = self.0[from.position.x][to.position.x];
            EdgeEstimate {
                value: 0.0,
                gamma: 0.99f64.powf(d),
                distance: d,
                truncated_distance: d,
                terminal_from: 0.0,
            }
        }
    }

    #[test]
    fn rebind_updates_row_zero_and_hides_same_position() {
        let d = vec![vec![0.0, 2.0, 4.0], vec![2.0, 0.0, 2.0], vec![4.0, 2.0, 0.0]];
        let src = Table(d);
        let mut gr = build_graph(states(3), &src, 8.0).unwrap();
        assert_eq!(gr.distance[0][2], 4.0);
        // The agent walked onto vertex 1.
        gr.rebind(EnvState::alive(Pos::new(1, 0)), &src);
        assert!(!gr.alive[0][1] && !gr.alive[2][1]);
        assert_eq!(gr.distance[0][2], 2.0);
        let plan = select_target(&gr, &value_iterate(&gr, 5).unwrap()).unwrap();
        assert_eq!(plan.target, 2);
    }

    #[test]
    fn composite_value_matches_recursion() {
        let v = [0.0, 0.0, 0.9];
        let g = [0.9, 0.8, 0.5];
        assert!((composite_value(&v, &g) - 0.9 * 0.8 * 0.9).abs() < 1e-15);
        assert_eq!(suffix_values(&v, &g)[2], 0.9);
    }

    /// All 5-step checkpoint sequences; shorter paths are covered by zero edges.
    fn brute_force(gr: &ProxyGraph, from: usize, depth: usize) -> f64 {
        if depth == 0 {
            return 0.0;
        }
        (0..gr.len())
            .map(|j| gr.reward[from][j] + gr.discount[from][j] * brute_force(gr, j, depth - 1))
            .fold(0.0, f64::max)
    }

    fn random_graph(seed: u64) -> ProxyGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=5);
        let m = |rng: &mut ChaCha8Rng, hi: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..hi)).collect()).collect()
        };
        let r = m(&mut rng, 1.0);
        let g = m(&mut rng, 1.0);
        let d = m(&mut rng, 12.0);
        let t = (0..n).map(|_| rng.random_range(0.0..0.7)).collect();
        ProxyGraph::from_matrices(states(n), r, g, d, t, 8.0).unwrap()
    }

    proptest! {
        #[test]
        fn five_sweeps_equal_path_enumeration(seed: u64) {
            let gr = random_graph(seed);
            let v = value_iterate(&gr, 5).unwrap();
            for i in 0..gr.len() {
                prop_assert!((v[i] - brute_force(&gr, i, 5)).abs() < 1e-9);
            }
        }

        #[test]
        fn value_iteration_is_monotone_and_bounded(seed: u64) {
            let gr = random_graph(seed);
            let g_max = gr.discount.iter().flatten().cloned().fold(0.0, f64::max);
            let mut last = vec![0.0; gr.len()];
            for k in 1..8 {
                let v = value_iterate(&gr, k).unwrap();
                for i in 0..gr.len() {
                    prop_assert!(v[i] >= last[i] - 1e-12);
                    prop_assert!(v[i] <= 1.0 / (1.0 - g_max) + 1e-9);
                }
                last = v;
            }
        }

        #[test]
        fn graph_invariants(seed: u64) {
            let gr = random_graph(seed);
            for i in 0..gr.len() {
                prop_assert_eq!(gr.reward[i][i], 0.0);
                prop_assert_eq!(gr.discount[i][0], 0.0);
                if gr.terminal[i] > TERMINAL_THRESHOLD {
                    prop_assert!(gr.discount[i].iter().all(|&g| g == 0.0));
                }
                for j in 0..gr.len() {
                    prop_assert!((0.0..=1.0).contains(&gr.discount[i][j]));
                    if gr.distance[i][j] > 8.0 {
                        prop_assert_eq!(gr.discount[i][j], 0.0);
                    }
                }
            }
            let plan = select_target(&gr, &value_iterate(&gr, 5).unwrap()).unwrap();
            prop_assert!(plan.target != 0);
            prop_assert!(plan.fallback || gr.alive[0][plan.target]);
        }

        #[test]
        fn target_is_invariant_to_reward_scale(seed: u64, scale in 0.01f64..100.0) {
            let gr = random_graph(seed);
            let n = gr.len();
            let zero = vec![vec![0.0; n]; n];
            let scaled: Vec<Vec<f64>> = gr.raw_reward.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
            let a = ProxyGraph::from_matrices(gr.vertices.clone(), gr.raw_reward.clone(), zero.clone(), gr.distance.clone(), gr.terminal.clone(), 8.0).unwrap();
            let b = ProxyGraph::from_matrices(gr.vertices.clone(), scaled, zero, gr.distance.clone(), gr.terminal.clone(), 8.0).unwrap();
            let pa = select_target(&a, &value_iterate(&a, 5).unwrap()).unwrap();
            let pb = select_target(&b, &value_iterate(&b, 5).unwrap()).unwrap();
            prop_assert_eq!(pa.target, pb.target);
        }

        #[test]
        fn perturbation_error_respects_the_bound(seed: u64, len in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = (0..len).map(|_| 0.99f64.powi(rng.random_range(1..=8))).collect();
            let mut v = vec![0.0; len];
            v[len - 1] = g[len - 1] / 0.99;
            for p in [Perturbation::Up, Perturbation::Down, Perturbation::Random] {
                let case = bound_case(&v, &g, 0.01, 0.01, p, &mut rng);
                prop_assert!(case.observed <= 1.5 * case.bound);
            }
        }
    }
}
