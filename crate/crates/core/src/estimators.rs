//! Tabular learned quantities: the goal-conditioned policy, the distributional
//! cumulative-reward and cumulative-distance estimators, and the terminal
//! classifier.
//!
//! Tables are keyed through an [`Abstraction`]. `Identity` keys on the full
//! state (context, position, target). `LocalField` keys on what an agent
//! could perceive locally: the four cells around it and the offset to the
//! target, plus the kind of the target cell. A `LocalField` lookup that
//! misses falls back to the same key without the target kind, and new
//! entries start from that coarser estimate.

use rand::Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::checkpoints::Context;
use crate::distributions::{
    shifted_distance_target, shifted_value_target, transplant_discount, Histogram, Support, BINS,
    D_MAX, OVERFLOW,
};
use crate::error::{Error, Result};
use crate::gridworld::{Action, CellKind, EnvState, Pos};
use crate::policy::GoalPolicy;
use crate::replay::HindsightSample;

pub const SNAPSHOT_VERSION: u32 = 1;
/// Terminal probability of a state never seen.
pub const TERMINAL_PRIOR: f64 = 0.5;
const MAX_OFFSET: i64 = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Abstraction {
    Identity,
    LocalField,
    WideField,
}

/// Table keys from most to least specific.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Keys {
    chain: [u64; 3],
    len: usize,
}

impl Keys {
    fn levels(&self) -> &[u64] {
        &self.chain[..self.len]
    }
}

/// Kind of the target cell. Empty targets with no empty walk from the
/// source get their own code.
fn target_code(context: &Context, source: Pos, target: EnvState) -> u64 {
    match (context.task().cell(target.position), target.terminated) {
        (CellKind::Empty, _) if !context.connected(source, target.position) => 4,
        (CellKind::Empty, _) => 0,
        (CellKind::Goal, _) => 1,
        (CellKind::Lava, true) => 2,
        (CellKind::Lava, false) => 3,
    }
}

fn offset(a: usize, b: usize) -> u64 {
    ((b as i64 - a as i64).clamp(-MAX_OFFSET, MAX_OFFSET) + MAX_OFFSET) as u64
}

impl Abstraction {
    fn keys(self, context: &Context, position: Pos, target: EnvState) -> Keys {
        match self {
            Abstraction::Identity => {
                let task = context.task();
                let key = 1 << 62
                    | (context.id() as u64) << 30
                    | (task.index(position) as u64) << 16
                    | (task.index(target.position) as u64) << 2
                    | target.terminated as u64;
                Keys {
                    chain: [key, 0, 0],
                    len: 1,
                }
            }
            Abstraction::LocalField | Abstraction::WideField => {
                let rel = offset(position.x, target.position.x) << 10 | offset(position.y, target.position.y) << 4;
                let kind = target_code(context, position, target);
                let view = (context.local_code(position) as u64) << 16 | rel;
                let fine = 2 << 62 | view | kind;
                let coarse = 3 << 62 | view;
                if self == Abstraction::WideField {
                    let wide = 1 << 61 | (context.ring_code(position) as u64) << 16 | rel | kind;
                    Keys {
                        chain: [wide, fine, coarse],
                        len: 3,
                    }
                } else {
                    Keys {
                        chain: [fine, coarse, 0],
                        len: 2,
                    }
                }
            }
        }
    }

    fn terminal_key(self, context: &Context, state: EnvState) -> u64 {
        let view = match self {
            Abstraction::Identity => {
                (context.id() as u64) << 16 | context.task().index(state.position) as u64
            }
            Abstraction::LocalField | Abstraction::WideField => context.local_code(state.position) as u64,
        };
        view << 1 | state.terminated as u64
    }
}

/// The most specific entry present.
fn read<'a, V>(map: &'a FxHashMap<u64, V>, keys: Keys) -> Option<&'a V> {
    keys.levels().iter().find_map(|k| map.get(k))
}

/// Applies `update` at every level. A missing entry starts as a copy of the
/// next less specific one.
fn write<V: Clone>(map: &mut FxHashMap<u64, V>, keys: Keys, default: &V, mut update: impl FnMut(&mut V)) {
    let mut seed = default.clone();
    for &k in keys.levels().iter().rev() {
        let entry = map.entry(k).or_insert_with(|| seed.clone());
        seed = entry.clone();
        update(entry);
    }
}

/// Resolves a sample's task id to its context.
pub trait ContextLookup {
    fn context(&self, id: u32) -> Option<&Context>;
}

impl ContextLookup for FxHashMap<u32, Context> {
    fn context(&self, id: u32) -> Option<&Context> {
        self.get(&id)
    }
}

impl ContextLookup for [Context] {
    fn context(&self, id: u32) -> Option<&Context> {
        self.iter().find(|c| c.id() == id)
    }
}

fn lookup<'a, C: ContextLookup + ?Sized>(contexts: &'a C, id: u32) -> Result<&'a Context> {
    contexts
        .context(id)
        .ok_or_else(|| Error::Contract(format!("unknown task id {id}")))
}

fn check_rate(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("learning rate must lie in (0, 1], got {alpha}")))
    }
}

/// Exact state match: position and termination flag.
pub fn reaches(next: EnvState, goal: EnvState) -> bool {
    next == goal
}

/// Linear annealing from `start` to `end` over the first `fraction` of
/// `total` interactions, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub fraction: f64,
    pub total: u64,
}

impl EpsilonSchedule {
    pub fn new(total: u64) -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.01,
            fraction: 0.5,
            total,
        }
    }

    pub fn value(&self, t: u64) -> f64 {
        let horizon = self.fraction * self.total as f64;
        if horizon <= 0.0 || t as f64 >= horizon {
            return self.end;
        }
        self.start + (self.end - self.start) * (t as f64 / horizon)
    }
}

/// Lowest-index argmax.
pub fn greedy(q: &[f32; 4]) -> Action {
    let mut best = 0;
    for a in 1..4 {
        if q[a] > q[best] {
            best = a;
        }
    }
    Action::from_index(best)
}

/// Argmax with ties broken uniformly at random.
pub fn greedy_random_tie<R: Rng + ?Sized>(q: &[f32; 4], rng: &mut R) -> Action {
    let top = q.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let ties: Vec<usize> = (0..4).filter(|&a| q[a] == top).collect();
    let pick = if ties.len() == 1 {
        ties[0]
    } else {
        ties[rng.random_range(0..ties.len())]
    };
    Action::from_index(pick)
}

/// Tabular Q-learning on the intrinsic "reach the target" reward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoalConditionedQ {
    pub abstraction: Abstraction,
    pub gamma_intrinsic: f64,
    #[serde(with = "keyed")]
    table: FxHashMap<u64, [f32; 4]>,
}

impl GoalConditionedQ {
    pub fn new(abstraction: Abstraction, gamma_intrinsic: f64) -> Self {
        GoalConditionedQ {
            abstraction,
            gamma_intrinsic,
            table: FxHashMap::default(),
        }
    }

    pub fn q_values(&self, context: &Context, position: Pos, target: EnvState) -> [f32; 4] {
        let keys = self.abstraction.keys(context, position, target);
        read(&self.table, keys).copied().unwrap_or([0.0; 4])
    }

    pub fn greedy_action(&self, context: &Context, position: Pos, target: EnvState) -> Action {
        greedy(&self.q_values(context, position, target))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// One pass of Q-learning over `batch` at rate `alpha`.
    pub fn update<C: ContextLookup + ?Sized>(
        &mut self,
        batch: &[HindsightSample],
        contexts: &C,
        alpha: f64,
    ) -> Result<()> {
        check_rate(alpha)?;
        for s in batch {
            let ctx = lookup(contexts, s.task_id)?;
            self.update_one(ctx, s, alpha);
        }
        Ok(())
    }

    fn update_one(&mut self, ctx: &Context, s: &HindsightSample, alpha: f64) {
        let tr = &s.transition;
        let target = if reaches(tr.next_state, s.goal) {
            1.0
        } else if tr.terminal {
            0.0
        } else {
            let next = self.q_values(ctx, tr.next_state.position, s.goal);
            let best = next.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            self.gamma_intrinsic as f32 * best
        };
        let keys = self.abstraction.keys(ctx, tr.state.position, s.goal);
        let a = tr.action.index();
        let alpha = alpha as f32;
        write(&mut self.table, keys, &[0.0; 4], |q| {
            q[a] += alpha * (target - q[a]);
        });
    }
}

impl GoalPolicy for GoalConditionedQ {
    fn act(&self, context: &Context, position: Pos, target: EnvState) -> Action {
        self.greedy_action(context, position, target)
    }
}

type Bins = [[f32; BINS]; 4];

fn point_bins(bin: usize) -> Bins {
    let mut h = [0.0; BINS];
    h[bin] = 1.0;
    [h; 4]
}

fn to_histogram(support: Support, bins: &[f32; BINS]) -> Histogram {
    let mut weights = [0.0; BINS];
    for (w, b) in weights.iter_mut().zip(bins) {
        *w = *b as f64;
    }
    Histogram::from_weights(support, &weights)
}

/// Edge quantities read off the estimators for one ordered checkpoint pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeEstimate {
    /// Expected cumulative task reward.
    pub value: f64,
    /// Expected cumulative discount, via the support transplant.
    pub gamma: f64,
    /// Expected distance with overflow counted as `D_MAX`.
    pub distance: f64,
    /// Expected distance with overflow counted as `truncation`.
    pub truncated_distance: f64,
    /// Terminal probability of the source.
    pub terminal_from: f64,
}

/// Distributional reward and distance tables plus the terminal classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeEstimatorTables {
    pub abstraction: Abstraction,
    pub gamma_task: f64,
    #[serde(with = "keyed")]
    value: FxHashMap<u64, Bins>,
    #[serde(with = "keyed")]
    distance: FxHashMap<u64, Bins>,
    #[serde(with = "keyed")]
    terminal: FxHashMap<u64, f32>,
}

const VALUE_DEFAULT: usize = 0;

impl EdgeEstimatorTables {
    pub fn new(abstraction: Abstraction, gamma_task: f64) -> Self {
        EdgeEstimatorTables {
            abstraction,
            gamma_task,
            value: FxHashMap::default(),
            distance: FxHashMap::default(),
            terminal: FxHashMap::default(),
        }
    }

    /// Value histogram; unseen entries are a point mass at zero.
    pub fn value_histogram(&self, ctx: &Context, position: Pos, target: EnvState, action: Action) -> Histogram {
        let keys = self.abstraction.keys(ctx, position, target);
        match read(&self.value, keys) {
            Some(b) => to_histogram(Support::Value, &b[action.index()]),
            None => Histogram::point_mass(Support::Value, VALUE_DEFAULT),
        }
    }

    /// Distance histogram; unseen entries are a point mass on overflow.
    pub fn distance_histogram(&self, ctx: &Context, position: Pos, target: EnvState, action: Action) -> Histogram {
        let keys = self.abstraction.keys(ctx, position, target);
        match read(&self.distance, keys) {
            Some(b) => to_histogram(Support::Distance, &b[action.index()]),
            None => Histogram::point_mass(Support::Distance, OVERFLOW),
        }
    }

    pub fn terminal_probability(&self, ctx: &Context, state: EnvState) -> f64 {
        let key = self.abstraction.terminal_key(ctx, state);
        self.terminal.get(&key).map_or(TERMINAL_PRIOR, |&p| p as f64)
    }

    pub fn len(&self) -> (usize, usize, usize) {
        (self.value.len(), self.distance.len(), self.terminal.len())
    }

    pub fn update_value<C: ContextLookup + ?Sized>(
        &mut self,
        q: &GoalConditionedQ,
        batch: &[HindsightSample],
        contexts: &C,
        alpha: f64,
    ) -> Result<()> {
        check_rate(alpha)?;
        for s in batch {
            let ctx = lookup(contexts, s.task_id)?;
            let tr = &s.transition;
            let target = if reaches(tr.next_state, s.goal) || tr.terminal {
                Histogram::at(Support::Value, tr.reward)
            } else {
                let a = q.greedy_action(ctx, tr.next_state.position, s.goal);
                let next = self.value_histogram(ctx, tr.next_state.position, s.goal, a);
                shifted_value_target(tr.reward, self.gamma_task, &next)
            };
            let keys = self.abstraction.keys(ctx, tr.state.position, s.goal);
            mix(&mut self.value, keys, &point_bins(VALUE_DEFAULT), tr.action, &target, alpha);
        }
        Ok(())
    }

    pub fn update_distance<C: ContextLookup + ?Sized>(
        &mut self,
        q: &GoalConditionedQ,
        batch: &[HindsightSample],
        contexts: &C,
        alpha: f64,
    ) -> Result<()> {
        check_rate(alpha)?;
        for s in batch {
            let ctx = lookup(contexts, s.task_id)?;
            self.distance_step(q, ctx, s, alpha);
        }
        Ok(())
    }

    fn distance_step(&mut self, q: &GoalConditionedQ, ctx: &Context, s: &HindsightSample, alpha: f64) {
        let tr = &s.transition;
        let target = if reaches(tr.next_state, s.goal) {
            Histogram::point_mass(Support::Distance, 0)
        } else if tr.terminal {
            Histogram::point_mass(Support::Distance, OVERFLOW)
        } else {
            let a = q.greedy_action(ctx, tr.next_state.position, s.goal);
            shifted_distance_target(&self.distance_histogram(ctx, tr.next_state.position, s.goal, a))
        };
        let keys = self.abstraction.keys(ctx, tr.state.position, s.goal);
        mix(&mut self.distance, keys, &point_bins(OVERFLOW), tr.action, &target, alpha);
    }

    /// Moves the terminal probability of both endpoints of each transition
    /// toward their observed flags.
    pub fn update_terminal<C: ContextLookup + ?Sized>(
        &mut self,
        batch: &[HindsightSample],
        contexts: &C,
        alpha: f64,
    ) -> Result<()> {
        check_rate(alpha)?;
        for s in batch {
            let ctx = lookup(contexts, s.task_id)?;
            let tr = &s.transition;
            for (state, flag) in [(tr.state, false), (tr.next_state, tr.terminal)] {
                let key = self.abstraction.terminal_key(ctx, state);
                let p = self.terminal.entry(key).or_insert(TERMINAL_PRIOR as f32);
                *p += alpha as f32 * (flag as u8 as f32 - *p);
            }
        }
        Ok(())
    }

    /// Trains the distance estimator toward freshly generated targets.
    ///
    /// Each sample keeps its transition but swaps its goal for one drawn by
    /// `generator` from the same context, then takes an ordinary distance
    /// update at rate `scale * alpha`. Targets that no trajectory can reach
    /// are pushed toward overflow.
    pub fn suppress_delusions<C, G>(
        &mut self,
        q: &GoalConditionedQ,
        batch: &[HindsightSample],
        contexts: &C,
        mut generator: G,
        scale: f64,
        alpha: f64,
    ) -> Result<()>
    where
        C: ContextLookup + ?Sized,
        G: FnMut(&Context) -> EnvState,
    {
        check_rate(alpha)?;
        let rate = scale * alpha;
        check_rate(rate)?;
        for s in batch {
            let ctx = lookup(contexts, s.task_id)?;
            let relabelled = HindsightSample {
                goal: generator(ctx),
                ..*s
            };
            self.distance_step(q, ctx, &relabelled, rate);
        }
        Ok(())
    }

    /// Edge estimate from `from` to `to` under the greedy policy.
    pub fn estimate_edge(
        &self,
        q: &GoalConditionedQ,
        ctx: &Context,
        from: EnvState,
        to: EnvState,
        truncation: f64,
    ) -> EdgeEstimate {
        let a = q.greedy_action(ctx, from.position, to);
        let keys = self.abstraction.keys(ctx, from.position, to);
        let value = read(&self.value, keys)
            .map_or(0.0, |b| to_histogram(Support::Value, &b[a.index()]).expectation());
        let dist = match read(&self.distance, keys) {
            Some(b) => to_histogram(Support::Distance, &b[a.index()]),
            None => Histogram::point_mass(Support::Distance, OVERFLOW),
        };
        EdgeEstimate {
            value,
            gamma: transplant_discount(&dist, self.gamma_task),
            distance: dist.finite_expectation(D_MAX as f64),
            truncated_distance: dist.finite_expectation(truncation),
            terminal_from: self.terminal_probability(ctx, from),
        }
    }
}

fn mix(map: &mut FxHashMap<u64, Bins>, keys: Keys, default: &Bins, action: Action, target: &Histogram, alpha: f64) {
    let a = action.index();
    let alpha = alpha as f32;
    write(map, keys, default, |bins| {
        for (p, t) in bins[a].iter_mut().zip(&target.probs) {
            *p = (1.0 - alpha) * *p + alpha * *t as f32;
        }
    });
}

/// A versioned, serialisable copy of every learned table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSnapshot {
    pub version: u32,
    pub policy: GoalConditionedQ,
    pub tables: EdgeEstimatorTables,
}

impl EstimatorSnapshot {
    pub fn new(policy: GoalConditionedQ, tables: EdgeEstimatorTables) -> Self {
        EstimatorSnapshot {
            version: SNAPSHOT_VERSION,
            policy,
            tables,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: EstimatorSnapshot = serde_json::from_str(text)
            .map_err(|e| Error::MalformedTask(format!("estimator snapshot: {e}")))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::Contract(format!(
                "snapshot version {} is not {SNAPSHOT_VERSION}",
                snap.version
            )));
        }
        Ok(snap)
    }
}

/// Serialises hash maps with u64 keys as sorted `[key, value]` pairs, so
/// snapshots are stable across runs.
mod keyed {
    use rustc_hash::FxHashMap;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<V: Serialize, S: Serializer>(map: &FxHashMap<u64, V>, s: S) -> Result<S::Ok, S::Error> {
        let mut pairs: Vec<(&u64, &V)> = map.iter().collect();
        pairs.sort_unstable_by_key(|(k, _)| **k);
        pairs.serialize(s)
    }

    pub fn deserialize<'de, V: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<FxHashMap<u64, V>, D::Error> {
        let pairs: Vec<(u64, V)> = Vec::deserialize(d)?;
        Ok(pairs.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gridworld::{step, MazeTask, Transition};
    use crate::oracle::{evaluate_policy, shortest_distances, OptimalPolicy};

    fn ctx(rows: &[&str]) -> Context {
        Context::new(0, Arc::new(MazeTask::from_rows(rows, 0.0, 0).unwrap()))
    }

    fn sample(c: &Context, from: Pos, a: Action, goal: EnvState) -> HindsightSample {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        HindsightSample {
            transition: step(c.task(), EnvState::alive(from), a, 0.0, &mut rng).unwrap(),
            goal,
            task_id: c.id(),
        }
    }

    #[test]
    fn targets_at_episode_boundaries() {
        let c = ctx(&[".L", "G."]);
        let contexts = vec![c.clone()];
        let mut q = GoalConditionedQ::new(Abstraction::Identity, 0.95);
        let mut t = EdgeEstimatorTables::new(Abstraction::Identity, 0.99);
        let goal = c.task().goal_state();
        let into_goal = [sample(&c, Pos::new(0, 0), Action::Down, goal)];
        q.update(&into_goal, contexts.as_slice(), 1.0).unwrap();
        t.update_value(&q, &into_goal, contexts.as_slice(), 1.0).unwrap();
        t.update_distance(&q, &into_goal, contexts.as_slice(), 1.0).unwrap();
        assert_eq!(q.q_values(&c, Pos::new(0, 0), goal)[Action::Down.index()], 1.0);
        let v = t.value_histogram(&c, Pos::new(0, 0), goal, Action::Down);
        assert_eq!(v, Histogram::point_mass(Support::Value, 15));
        let d = t.distance_histogram(&c, Pos::new(0, 0), goal, Action::Down);
        assert_eq!(d, Histogram::point_mass(Support::Distance, 0));

        // Reaching an empty target: value target is a point mass at 0.
        let reach_empty = [sample(&c, Pos::new(0, 0), Action::Right, EnvState::alive(Pos::new(1, 0)))];
        let to_lava = [sample(&c, Pos::new(0, 0), Action::Right, goal)];
        q.update(&to_lava, contexts.as_slice(), 1.0).unwrap();
        t.update_value(&q, &reach_empty, contexts.as_slice(), 1.0).unwrap();
        t.update_distance(&q, &to_lava, contexts.as_slice(), 1.0).unwrap();
        assert_eq!(q.q_values(&c, Pos::new(0, 0), goal)[Action::Right.index()], 0.0);
        let d = t.distance_histogram(&c, Pos::new(0, 0), goal, Action::Right);
        assert_eq!(d, Histogram::point_mass(Support::Distance, OVERFLOW));
        let v = t.value_histogram(&c, Pos::new(0, 0), EnvState::alive(Pos::new(1, 0)), Action::Right);
        assert_eq!(v, Histogram::point_mass(Support::Value, 0));
    }

    #[test]
    fn rates_are_checked() {
        let c = ctx(&[".G"]);
        let mut q = GoalConditionedQ::new(Abstraction::Identity, 0.95);
        assert!(q.update(&[], [c].as_slice(), 0.0).is_err());
        assert!(q.update(&[], &FxHashMap::default(), 1.5).is_err());
    }

    #[test]
    fn epsilon_schedule_anneals() {
        let e = EpsilonSchedule::new(1000);
        assert_eq!(e.value(0), 1.0);
        assert!((e.value(250) - 0.505).abs() < 1e-12);
        assert_eq!(e.value(500), 0.01);
        assert_eq!(e.value(10_000), 0.01);
    }

    proptest! {
        #[test]
        fn epsilon_is_monotone_and_in_range(total in 1u64..100_000, a in 0u64..200_000, b in 0u64..200_000) {
            let e = EpsilonSchedule::new(total);
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(e.value(hi) <= e.value(lo));
            prop_assert!((0.0..=1.0).contains(&e.value(a)));
        }
    }

    /// Every (state, goal, action) transition of a task, each reached goal
    /// labelled with an exact state.
    fn full_coverage(c: &Context) -> Vec<HindsightSample> {
        let t = c.task();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::new();
        let goals: Vec<EnvState> = (0..t.num_cells()).map(|i| t.state_at(t.pos(i))).collect();
        for s in t.empty_cells() {
            for a in Action::ALL {
                let tr: Transition = step(t, EnvState::alive(s), a, 0.0, &mut rng).unwrap();
                for &g in &goals {
                    out.push(HindsightSample {
                        transition: tr,
                        goal: g,
                        task_id: c.id(),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn q_learning_recovers_optimal_policy() {
        let c = ctx(&["...G", ".L..", "....", "L..."]);
        let t = c.task();
        let contexts = vec![c.clone()];
        let data = full_coverage(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut q = GoalConditionedQ::new(Abstraction::Identity, 0.95);
        for _ in 0..100_000 / 64 {
            let batch: Vec<_> = (0..64).map(|_| data[rng.random_range(0..data.len())]).collect();
            q.update(&batch, contexts.as_slice(), 0.1).unwrap();
        }
        for _ in 0..200 {
            q.update(&data, contexts.as_slice(), 0.5).unwrap();
        }
        let opt = OptimalPolicy::compute(t, 0.0, 0.95);
        let dist = shortest_distances(t);
        for s in t.empty_cells() {
            for g in t.empty_cells().chain([t.goal()]) {
                let optimal = opt.optimal_actions(t, s, g);
                if s != g && dist.between(t, s, g).is_finite() && optimal.len() == 1 {
                    assert_eq!(q.greedy_action(&c, s, t.state_at(g)), optimal[0], "{s} -> {g}");
                }
            }
        }
    }

    #[test]
    fn estimators_converge_to_oracle_under_frozen_policy() {
        let c = ctx(&["...G", ".L..", "....", "L..."]);
        let t = c.task();
        let contexts = vec![c.clone()];
        let opt = OptimalPolicy::compute(t, 0.0, 0.95);
        // Freeze the policy: Q is one-hot on the oracle action.
        let mut q = GoalConditionedQ::new(Abstraction::Identity, 0.95);
        for s in t.empty_cells() {
            for i in 0..t.num_cells() {
                let g = t.state_at(t.pos(i));
                let keys = q.abstraction.keys(&c, s, g);
                let mut row = [0.0; 4];
                row[opt.action(t, s, g.position).index()] = 1.0;
                q.table.insert(keys.chain[0], row);
            }
        }
        let data = full_coverage(&c);
        let mut tables = EdgeEstimatorTables::new(Abstraction::Identity, 0.99);
        for _ in 0..300 {
            tables.update_value(&q, &data, contexts.as_slice(), 0.5).unwrap();
            tables.update_distance(&q, &data, contexts.as_slice(), 0.5).unwrap();
        }
        for i in 0..t.num_cells() {
            let g = t.pos(i);
            if t.cell(g) == CellKind::Lava {
                continue;
            }
            let truth = evaluate_policy(&c, &opt, g, 0.99, 0.0).unwrap();
            for s in t.empty_cells().filter(|&s| s != g) {
                let e = tables.estimate_edge(&q, &c, EnvState::alive(s), t.state_at(g), 30.0);
                let si = t.index(s);
                assert!((e.value - truth.value[si]).abs() < 0.02, "value {s}->{g}");
                if truth.distance[si] <= 15.0 {
                    assert!((e.distance - truth.distance[si]).abs() < 0.1, "distance {s}->{g}");
                    let exact = 0.99f64.powf(truth.distance[si]);
                    assert!((e.gamma - exact).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn terminal_classifier_matches_grid() {
        let c = ctx(&["..L", ".LG", "..."]);
        let contexts = vec![c.clone()];
        let data = full_coverage(&c);
        for abs in [Abstraction::Identity, Abstraction::LocalField] {
            let mut t = EdgeEstimatorTables::new(abs, 0.99);
            for _ in 0..20 {
                t.update_terminal(&data, contexts.as_slice(), 0.1).unwrap();
            }
            for i in 0..9 {
                let s = c.task().state_at(c.task().pos(i));
                let p = t.terminal_probability(&c, s);
                assert_eq!(p > 0.5, s.terminated, "{abs:?} {}", s.position);
            }
        }
    }

    #[test]
    fn suppression_pushes_phantoms_to_overflow() {
        let c = ctx(&["....", ".L..", "...G"]);
        let contexts = vec![c.clone()];
        let phantom = EnvState::alive(Pos::new(1, 1));
        let data = full_coverage(&c);
        let q = GoalConditionedQ::new(Abstraction::LocalField, 0.95);
        let mut t = EdgeEstimatorTables::new(Abstraction::LocalField, 0.99);
        // Train on real goals first so the coarse entries are optimistic.
        for _ in 0..50 {
            t.update_distance(&q, &data, contexts.as_slice(), 0.5).unwrap();
        }
        for _ in 0..400 {
            t.suppress_delusions(&q, &data, contexts.as_slice(), |_: &Context| phantom, 0.25, 0.5)
                .unwrap();
        }
        for s in c.task().empty_cells() {
            let e = t.estimate_edge(&q, &c, EnvState::alive(s), phantom, 30.0);
            assert!(e.gamma < 0.01, "{s}: {}", e.gamma);
        }
    }

    #[test]
    fn local_field_backs_off_to_coarse_entries() {
        let c = ctx(&["....", "...G"]);
        let contexts = vec![c.clone()];
        let mut q = GoalConditionedQ::new(Abstraction::LocalField, 0.95);
        let target = EnvState::alive(Pos::new(3, 0));
        for _ in 0..2 {
            q.update(&[sample(&c, Pos::new(2, 0), Action::Right, target)], contexts.as_slice(), 1.0)
                .unwrap();
            q.update(&[sample(&c, Pos::new(1, 0), Action::Right, target)], contexts.as_slice(), 1.0)
                .unwrap();
        }
        // Same surroundings and offset, but the target is a lava phantom.
        let other = Context::new(1, Arc::new(MazeTask::from_rows(&["...L", "...G"], 0.0, 0).unwrap()));
        let seen = q.q_values(&other, Pos::new(1, 0), EnvState::alive(Pos::new(3, 0)));
        assert_eq!(seen[Action::Right.index()], 0.95);
        assert_eq!(q.greedy_action(&other, Pos::new(1, 0), EnvState::alive(Pos::new(3, 0))), Action::Right);
    }

    #[test]
    fn edge_estimates_are_bounded_and_overflow_means_zero_discount() {
        let c = ctx(&["...G"]);
        let q = GoalConditionedQ::new(Abstraction::Identity, 0.95);
        let t = EdgeEstimatorTables::new(Abstraction::Identity, 0.99);
        let e = t.estimate_edge(&q, &c, EnvState::alive(Pos::new(0, 0)), c.task().goal_state(), 30.0);
        assert_eq!(e.gamma, 0.0);
        assert_eq!(e.distance, 15.0);
        assert_eq!(e.truncated_distance, 30.0);
        assert_eq!(e.terminal_from, TERMINAL_PRIOR);
    }

    #[test]
    fn snapshot_round_trips() {
        let c = ctx(&["....", "...G"]);
        let contexts = vec![c.clone()];
        let data = full_coverage(&c);
        let mut q = GoalConditionedQ::new(Abstraction::LocalField, 0.95);
        let mut t = EdgeEstimatorTables::new(Abstraction::LocalField, 0.99);
        q.update(&data, contexts.as_slice(), 0.1).unwrap();
        t.update_distance(&q, &data, contexts.as_slice(), 0.1).unwrap();
        t.update_value(&q, &data, contexts.as_slice(), 0.1).unwrap();
        t.update_terminal(&data, contexts.as_slice(), 0.1).unwrap();
        let snap = EstimatorSnapshot::new(q, t);
        let json = serde_json::to_string(&snap).unwrap();
        let back = EstimatorSnapshot::from_json(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        let bumped = json.replacen("\"version\":1", "\"version\":2", 1);
        assert!(EstimatorSnapshot::from_json(&bumped).is_err());
    }
}
