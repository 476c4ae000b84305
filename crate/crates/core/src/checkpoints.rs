//! Checkpoint proposal and pruning.
//!
//! A state splits into an episodic context (the maze) and a partial
//! description (the agent's coordinates). Checkpoints are proposed by
//! sampling partial descriptions and fusing them with the current context,
//! then thinned with a k-medoids pass over estimated distances.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{Action, CellKind, EnvState, MazeTask, Pos};

/// Episode-stable part of a state: the maze an agent lives in.
#[derive(Debug, Clone)]
pub struct Context {
    id: u32,
    task: Arc<MazeTask>,
    valid: Vec<bool>,
    local: Vec<u16>,
    ring: Vec<u16>,
    region: Vec<u32>,
}

impl Context {
    pub fn new(id: u32, task: Arc<MazeTask>) -> Self {
        let valid = goal_component(&task);
        let local = (0..task.num_cells())
            .map(|i| local_code(&task, task.pos(i)))
            .collect();
        let ring = (0..task.num_cells())
            .map(|i| ring_code(&task, task.pos(i)))
            .collect();
        let region = empty_regions(&task);
        Context {
            id,
            task,
            valid,
            local,
            ring,
            region,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn task(&self) -> &MazeTask {
        &self.task
    }

    pub fn shared_task(&self) -> Arc<MazeTask> {
        Arc::clone(&self.task)
    }

    /// Non-lava cell connected to the goal.
    pub fn is_valid_position(&self, p: Pos) -> bool {
        self.valid[self.task.index(p)]
    }

    /// Code of the four cells around `p`, below [`LOCAL_CODES`]. Walls count
    /// as a fourth cell kind. The cell itself is not part of the code.
    pub fn local_code(&self, p: Pos) -> u16 {
        self.local[self.task.index(p)]
    }

    /// Code of the eight cells around `p`: the [`Self::local_code`] in the
    /// low byte, the diagonal cells in the high byte.
    pub fn ring_code(&self, p: Pos) -> u16 {
        self.ring[self.task.index(p)]
    }

    /// Whether `a` and `b` are empty cells joined by a walk through empty
    /// cells, so that each can reach the other.
    pub fn connected(&self, a: Pos, b: Pos) -> bool {
        let ra = self.region[self.task.index(a)];
        ra != NO_REGION && ra == self.region[self.task.index(b)]
    }
}

/// Number of distinct local-neighbourhood codes.
pub const LOCAL_CODES: u16 = 256;

fn kind_code(kind: Option<CellKind>) -> u16 {
    match kind {
        Some(CellKind::Empty) => 0,
        Some(CellKind::Lava) => 1,
        Some(CellKind::Goal) => 2,
        None => 3,
    }
}

fn local_code(task: &MazeTask, p: Pos) -> u16 {
    let mut code = 0;
    for (k, a) in Action::ALL.into_iter().enumerate() {
        let (dx, dy) = a.delta();
        let around = task.cell_at(p.x as isize + dx, p.y as isize + dy);
        code += kind_code(around) << (2 * k);
    }
    code
}

fn ring_code(task: &MazeTask, p: Pos) -> u16 {
    let mut code = local_code(task, p);
    for (k, (dx, dy)) in [(-1, -1), (1, -1), (-1, 1), (1, 1)].into_iter().enumerate() {
        let around = task.cell_at(p.x as isize + dx, p.y as isize + dy);
        code += kind_code(around) << (8 + 2 * k);
    }
    code
}

/// Non-lava cells joined to the goal through non-lava cells.
fn goal_component(task: &MazeTask) -> Vec<bool> {
    let mut seen = vec![false; task.num_cells()];
    let mut queue = VecDeque::from([task.goal()]);
    seen[task.index(task.goal())] = true;
    while let Some(p) = queue.pop_front() {
        for a in Action::ALL {
            let q = task.move_from(p, a);
            let qi = task.index(q);
            if !seen[qi] && task.cell(q) != CellKind::Lava {
                seen[qi] = true;
                queue.push_back(q);
            }
        }
    }
    seen
}

const NO_REGION: u32 = u32::MAX;

/// Connected-component labels of the empty cells; other cells get `NO_REGION`.
fn empty_regions(task: &MazeTask) -> Vec<u32> {
    let mut label = vec![NO_REGION; task.num_cells()];
    let mut next = 0;
    for start in task.empty_cells() {
        if label[task.index(start)] != NO_REGION {
            continue;
        }
        label[task.index(start)] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for a in Action::ALL {
                let q = task.move_from(p, a);
                if task.cell(q) == CellKind::Empty && label[task.index(q)] == NO_REGION {
                    label[task.index(q)] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    label
}

/// State-identifying part of a state: grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartialDescription {
    pub position: Pos,
}

/// Combines a context with a partial description.
///
/// Only the goal fuses to a terminated state. A lava coordinate therefore
/// yields a state no trajectory can occupy, which is what a generator's
/// delusional output looks like.
pub fn fuse(context: &Context, z: PartialDescription) -> EnvState {
    EnvState {
        position: z.position,
        terminated: context.task().cell(z.position) == CellKind::Goal,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSet {
    pub checkpoints: Vec<EnvState>,
    /// Indices into `checkpoints` that pruning must keep.
    pub must_keep: Vec<usize>,
}

impl CheckpointSet {
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    /// Drops repeated states and any equal to `exclude`, keeping first
    /// occurrences and remapping `must_keep`.
    pub fn deduplicated(&self, exclude: Option<EnvState>) -> CheckpointSet {
        let mut checkpoints: Vec<EnvState> = Vec::with_capacity(self.len());
        let mut remap = vec![None; self.len()];
        for (i, &c) in self.checkpoints.iter().enumerate() {
            if Some(c) == exclude {
                continue;
            }
            match checkpoints.iter().position(|&k| k == c) {
                Some(j) => remap[i] = Some(j),
                None => {
                    remap[i] = Some(checkpoints.len());
                    checkpoints.push(c);
                }
            }
        }
        let mut must_keep: Vec<usize> = self.must_keep.iter().filter_map(|&i| remap[i]).collect();
        must_keep.sort_unstable();
        must_keep.dedup();
        CheckpointSet {
            checkpoints,
            must_keep,
        }
    }
}

/// Proposes `n` checkpoints: the goal first, then `n - 1` sampled positions.
///
/// Without `include_invalid` positions come uniformly from the cells joined
/// to the goal; with it, uniformly from the whole grid.
pub fn generate<R: Rng + ?Sized>(
    context: &Context,
    n: usize,
    include_invalid: bool,
    rng: &mut R,
) -> Result<CheckpointSet> {
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 checkpoints, got {n}")));
    }
    let task = context.task();
    let pool: Vec<Pos> = if include_invalid {
        (0..task.num_cells()).map(|i| task.pos(i)).collect()
    } else {
        (0..task.num_cells())
            .map(|i| task.pos(i))
            .filter(|&p| context.is_valid_position(p))
            .collect()
    };
    let mut checkpoints = Vec::with_capacity(n);
    checkpoints.push(task.goal_state());
    for _ in 1..n {
        let z = PartialDescription {
            position: pool[rng.random_range(0..pool.len())],
        };
        checkpoints.push(fuse(context, z));
    }
    Ok(CheckpointSet {
        checkpoints,
        must_keep: vec![0],
    })
}

/// Distance stand-in for the overflow outcome in the pruning input.
pub const TRUNCATED_DISTANCE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Medoids {
    /// Sorted candidate indices.
    pub medoids: Vec<usize>,
    /// Clustering cost after initialisation and after every accepted swap.
    pub cost_trace: Vec<f64>,
}

/// Sum over points of the distance to the nearest medoid.
pub fn clustering_cost(dist: &[Vec<f64>], medoids: &[usize]) -> f64 {
    (0..dist.len())
        .map(|i| {
            medoids
                .iter()
                .map(|&m| dist[i][m])
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// `min(D, D^T)` elementwise.
pub fn symmetrize(dist: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = dist.len();
    (0..n)
        .map(|i| (0..n).map(|j| dist[i][j].min(dist[j][i])).collect())
        .collect()
}

/// PAM over a symmetric finite distance matrix.
///
/// Starts from `must_keep` plus random other points, then applies the best
/// single medoid swap while it strictly lowers the cost. Members of
/// `must_keep` are never swapped out.
pub fn pam<R: Rng + ?Sized>(
    dist: &[Vec<f64>],
    k: usize,
    must_keep: &[usize],
    rng: &mut R,
) -> Result<Medoids> {
    let n = dist.len();
    if k < must_keep.len() {
        return Err(Error::Contract(format!(
            "k = {k} is smaller than the {} states that must be kept",
            must_keep.len()
        )));
    }
    if k >= n {
        let medoids: Vec<usize> = (0..n).collect();
        let cost = clustering_cost(dist, &medoids);
        return Ok(Medoids {
            medoids,
            cost_trace: vec![cost],
        });
    }
    let mut is_medoid = vec![false; n];
    for &m in must_keep {
        is_medoid[m] = true;
    }
    let fixed = is_medoid.clone();
    let others: Vec<usize> = (0..n).filter(|&i| !is_medoid[i]).collect();
    for j in sample(rng, others.len(), k - must_keep.len()) {
        is_medoid[others[j]] = true;
    }
    let mut medoids: Vec<usize> = (0..n).filter(|&i| is_medoid[i]).collect();

    let mut cost = clustering_cost(dist, &medoids);
    let mut cost_trace = vec![cost];
    let mut nearest = vec![0usize; n];
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    loop {
        for i in 0..n {
            let (mut b1, mut b2, mut arg) = (f64::INFINITY, f64::INFINITY, 0);
            for &m in &medoids {
                let d = dist[i][m];
                if d < b1 {
                    b2 = b1;
                    b1 = d;
                    arg = m;
                } else if d < b2 {
                    b2 = d;
                }
            }
            nearest[i] = arg;
            d1[i] = b1;
            d2[i] = b2;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for (slot, &out) in medoids.iter().enumerate() {
            if fixed[out] {
                continue;
            }
            for c in 0..n {
                if is_medoid[c] {
                    continue;
                }
                let swapped: f64 = (0..n)
                    .map(|i| {
                        let keep = if nearest[i] == out { d2[i] } else { d1[i] };
                        keep.min(dist[i][c])
                    })
                    .sum();
                if best.is_none_or(|(b, _, _)| swapped < b) {
                    best = Some((swapped, slot, c));
                }
            }
        }
        match best {
            Some((swapped, slot, c)) if swapped < cost - 1e-12 => {
                is_medoid[medoids[slot]] = false;
                is_medoid[c] = true;
                medoids[slot] = c;
                cost = clustering_cost(dist, &medoids);
                cost_trace.push(cost);
            }
            _ => break,
        }
    }
    medoids.sort_unstable();
    Ok(Medoids {
        medoids,
        cost_trace,
    })
}

/// Prunes `candidates` to `k` medoids of the symmetrised distance matrix.
///
/// `distance` must already be truncated to finite values. When fewer than
/// `k` candidates exist all are kept.
pub fn kmedoids_prune<R: Rng + ?Sized>(
    candidates: &CheckpointSet,
    distance: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> Result<CheckpointSet> {
    if distance.len() != candidates.len() || distance.iter().any(|r| r.len() != candidates.len()) {
        return Err(Error::Contract("distance matrix does not match candidates".into()));
    }
    if distance.iter().flatten().any(|d| !d.is_finite()) {
        return Err(Error::Contract("pruning distances must be finite".into()));
    }
    let sym = symmetrize(distance);
    let result = pam(&sym, k, &candidates.must_keep, rng)?;
    let checkpoints = result
        .medoids
        .iter()
        .map(|&m| candidates.checkpoints[m])
        .collect();
    let must_keep = result
        .medoids
        .iter()
        .enumerate()
        .filter(|(_, m)| candidates.must_keep.contains(m))
        .map(|(i, _)| i)
        .collect();
    Ok(CheckpointSet {
        checkpoints,
        must_keep,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gridworld::generate_task;

    fn ctx(rows: &[&str]) -> Context {
        Context::new(0, Arc::new(MazeTask::from_rows(rows, 0.0, 0).unwrap()))
    }

    #[test]
    fn generate_includes_goal_first() {
        let c = Context::new(1, Arc::new(generate_task(8, 8, 0.4, 3).unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = generate(&c, 32, false, &mut rng).unwrap();
        assert_eq!(set.len(), 32);
        assert_eq!(set.checkpoints[0], c.task().goal_state());
        assert_eq!(set.must_keep, vec![0]);
        assert!(set.checkpoints.iter().all(|s| c.is_valid_position(s.position)));
        assert!(generate(&c, 1, false, &mut rng).is_err());
    }

    #[test]
    fn generate_is_deterministic() {
        let c = Context::new(1, Arc::new(generate_task(8, 8, 0.4, 3).unwrap()));
        let a = generate(&c, 32, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate(&c, 32, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_empty_maze_gives_valid_checkpoints() {
        let c = ctx(&["....", "....", "...G"]);
        let set = generate(&c, 32, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(set.checkpoints.iter().all(|s| c.is_valid_position(s.position)));
    }

    #[test]
    fn invalid_fraction_tracks_lava_density() {
        let c = Context::new(0, Arc::new(generate_task(12, 12, 0.4, 8).unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut lava, mut total) = (0usize, 0usize);
        for _ in 0..2000 {
            let set = generate(&c, 32, true, &mut rng).unwrap();
            for s in &set.checkpoints[1..] {
                total += 1;
                lava += (c.task().cell(s.position) == CellKind::Lava) as usize;
            }
        }
        let p = c.task().lava_fraction();
        let f = lava as f64 / total as f64;
        let se = (p * (1.0 - p) / total as f64).sqrt();
        assert!((f - p).abs() < 4.0 * se, "{f} vs {p}");
    }

    #[test]
    fn lava_fuses_to_a_phantom_state() {
        let c = ctx(&[".L.G"]);
        let s = fuse(&c, PartialDescription { position: Pos::new(1, 0) });
        assert!(!s.terminated);
        assert_ne!(s, c.task().state_at(Pos::new(1, 0)));
        let g = fuse(&c, PartialDescription { position: Pos::new(3, 0) });
        assert_eq!(g, c.task().goal_state());
    }

    #[test]
    fn regions_split_at_lava_and_the_goal() {
        let c = ctx(&["..L.", "LLL.", ".G..", "L..."]);
        assert!(c.connected(Pos::new(0, 0), Pos::new(1, 0)));
        assert!(c.connected(Pos::new(3, 0), Pos::new(1, 3)));
        assert!(!c.connected(Pos::new(0, 0), Pos::new(3, 0)));
        assert!(!c.connected(Pos::new(0, 2), Pos::new(1, 3)));
        assert!(c.connected(Pos::new(0, 2), Pos::new(0, 2)));
        assert!(!c.connected(Pos::new(2, 0), Pos::new(2, 0)));
        assert!(!c.connected(Pos::new(1, 2), Pos::new(1, 2)));
    }

    #[test]
    fn local_codes_are_in_range_and_see_walls() {
        let c = ctx(&["..", ".G"]);
        let code = c.local_code(Pos::new(0, 0));
        assert!(code < LOCAL_CODES);
        // Up and Left are outside the grid.
        assert_eq!(code & 0b11, 3);
        assert_eq!((code >> 4) & 0b11, 3);
        // Down from (1, 0) is the goal.
        assert_eq!((c.local_code(Pos::new(1, 0)) >> 2) & 0b11, 2);
    }

    #[test]
    fn deduplication_remaps_must_keep() {
        let a = EnvState::alive(Pos::new(0, 0));
        let b = EnvState::alive(Pos::new(1, 0));
        let g = EnvState {
            position: Pos::new(2, 0),
            terminated: true,
        };
        let set = CheckpointSet {
            checkpoints: vec![a, b, a, g, b],
            must_keep: vec![3],
        };
        let d = set.deduplicated(Some(b));
        assert_eq!(d.checkpoints, vec![a, g]);
        assert_eq!(d.must_keep, vec![1]);
    }

    #[test]
    fn prune_keeps_everything_when_k_is_large() {
        let c = ctx(&["...G"]);
        let set = CheckpointSet {
            checkpoints: (0..4).map(|x| c.task().state_at(Pos::new(x, 0))).collect(),
            must_keep: vec![3],
        };
        let d: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| (i as f64 - j as f64).abs()).collect())
            .collect();
        let out = kmedoids_prune(&set, &d, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, set);
        assert!(kmedoids_prune(&set, &d, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn two_clusters() -> Vec<Vec<f64>> {
        let pts: [(f64, f64); 8] = [
            (0.0, 0.0),
            (1.0, 0.0),
            (0.0, 1.5),
            (1.2, 1.0),
            (20.0, 20.0),
            (21.0, 20.5),
            (19.5, 21.0),
            (20.0, 22.0),
        ];
        pts.iter()
            .map(|a| {
                pts.iter()
                    .map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn two_far_clusters_get_one_medoid_each() {
        let d = two_clusters();
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..8 {
            for b in a + 1..8 {
                let c = clustering_cost(&d, &[a, b]);
                if c < best.0 {
                    best = (c, a, b);
                }
            }
        }
        for seed in 0..20 {
            let m = pam(&d, 2, &[], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(m.medoids, vec![best.1, best.2]);
        }
    }

    proptest! {
        #[test]
        fn pam_is_a_swap_local_optimum(seed in 0u64..10_000, k in 1usize..6, keep in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 10;
            let raw: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(0.0..30.0)).collect())
                .collect();
            let mut d = symmetrize(&raw);
            for (i, row) in d.iter_mut().enumerate() {
                row[i] = 0.0;
            }
            let must: Vec<usize> = (0..keep.min(k)).collect();
            let m = pam(&d, k, &must, &mut rng).unwrap();
            prop_assert_eq!(m.medoids.len(), k);
            for &i in &must {
                prop_assert!(m.medoids.contains(&i));
            }
            for w in m.cost_trace.windows(2) {
                prop_assert!(w[1] < w[0]);
            }
            let cost = *m.cost_trace.last().unwrap();
            prop_assert!((cost - clustering_cost(&d, &m.medoids)).abs() < 1e-9);
            for (slot, &out) in m.medoids.iter().enumerate() {
                if must.contains(&out) {
                    continue;
                }
                for c in (0..n).filter(|c| !m.medoids.contains(c)) {
                    let mut swapped = m.medoids.clone();
                    swapped[slot] = c;
                    prop_assert!(clustering_cost(&d, &swapped) >= cost - 1e-9);
                }
            }
        }
    }
}
