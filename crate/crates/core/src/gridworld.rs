//! Procedurally generated lava mazes.
//!
//! A [`MazeTask`] is a rectangular grid of empty cells, lava and a single goal.
//! Entering lava or the goal ends the episode; only the goal pays a reward.
//! The grid boundary is the only wall: moving into it leaves the agent in place.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grids are resampled this many times before a corridor is carved.
pub const MAX_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub const fn new(x: usize, y: usize) -> Self {
        Pos { x, y }
    }

    pub fn manhattan(self, other: Pos) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Empty,
    Lava,
    Goal,
}

impl CellKind {
    pub fn is_terminal(self) -> bool {
        !matches!(self, CellKind::Empty)
    }

    fn to_char(self) -> char {
        match self {
            CellKind::Empty => '.',
            CellKind::Lava => 'L',
            CellKind::Goal => 'G',
        }
    }

    fn from_char(c: char) -> Option<Self> {
        match c {
            '.' => Some(CellKind::Empty),
            'L' => Some(CellKind::Lava),
            'G' => Some(CellKind::Goal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

/// Agent position within a task. Paired with the task it is the full state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvState {
    pub position: Pos,
    pub terminated: bool,
}

impl EnvState {
    pub const fn alive(position: Pos) -> Self {
        EnvState {
            position,
            terminated: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EnvState,
    pub action: Action,
    pub reward: f64,
    pub next_state: EnvState,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpawnMode {
    /// Uniform over non-terminal cells; used during training.
    TrainUniform,
    /// The fixed cell at the far side of the grid from the goal.
    EvalOpposite,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TaskJson", try_from = "TaskJson")]
pub struct MazeTask {
    width: usize,
    height: usize,
    cells: Vec<CellKind>,
    goal: Pos,
    difficulty: f64,
    seed: u64,
}

impl MazeTask {
    /// Builds a task from explicit rows of `.`, `L` and `G`.
    ///
    /// Used for hand-made fixtures; `difficulty` and `seed` are recorded as given.
    pub fn from_rows(rows: &[&str], difficulty: f64, seed: u64) -> Result<Self> {
        let json = TaskJson {
            width: rows.first().map_or(0, |r| r.chars().count()),
            height: rows.len(),
            difficulty,
            seed,
            goal: [0, 0],
            cells: rows.iter().map(|r| r.to_string()).collect(),
        };
        let goal = json
            .cells
            .iter()
            .enumerate()
            .find_map(|(y, row)| row.chars().position(|c| c == 'G').map(|x| [x, y]))
            .ok_or_else(|| Error::MalformedTask("no goal cell".into()))?;
        MazeTask::try_from(TaskJson { goal, ..json })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn goal(&self) -> Pos {
        self.goal
    }

    pub fn difficulty(&self) -> f64 {
        self.difficulty
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn index(&self, p: Pos) -> usize {
        p.y * self.width + p.x
    }

    pub fn pos(&self, index: usize) -> Pos {
        Pos::new(index % self.width, index / self.width)
    }

    pub fn cell(&self, p: Pos) -> CellKind {
        self.cells[self.index(p)]
    }

    pub fn cells(&self) -> &[CellKind] {
        &self.cells
    }

    pub fn contains(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Kind of the cell at signed coordinates, `None` outside the grid.
    pub fn cell_at(&self, x: isize, y: isize) -> Option<CellKind> {
        self.contains(x, y)
            .then(|| self.cells[y as usize * self.width + x as usize])
    }

    pub fn is_terminal(&self, p: Pos) -> bool {
        self.cell(p).is_terminal()
    }

    /// Deterministic successor of `p` under `action`; walls leave the agent in place.
    pub fn move_from(&self, p: Pos, action: Action) -> Pos {
        let (dx, dy) = action.delta();
        let (x, y) = (p.x as isize + dx, p.y as isize + dy);
        if self.contains(x, y) {
            Pos::new(x as usize, y as usize)
        } else {
            p
        }
    }

    /// The real state an agent occupies at `p`.
    pub fn state_at(&self, p: Pos) -> EnvState {
        EnvState {
            position: p,
            terminated: self.is_terminal(p),
        }
    }

    pub fn goal_state(&self) -> EnvState {
        self.state_at(self.goal)
    }

    pub fn empty_cells(&self) -> impl Iterator<Item = Pos> + '_ {
        (0..self.num_cells())
            .filter(|&i| self.cells[i] == CellKind::Empty)
            .map(|i| self.pos(i))
    }

    pub fn lava_fraction(&self) -> f64 {
        let lava = self.cells.iter().filter(|&&c| c == CellKind::Lava).count();
        lava as f64 / self.num_cells() as f64
    }

    /// Episodes are truncated (not terminated) after this many interactions.
    pub fn step_cap(&self) -> usize {
        4 * self.width * self.height
    }

    /// Grid corner diagonally opposite the goal's quadrant.
    pub fn opposite_corner(&self) -> Pos {
        let x = if self.goal.x < self.width / 2 {
            self.width - 1
        } else {
            0
        };
        let y = if self.goal.y < self.height / 2 {
            self.height - 1
        } else {
            0
        };
        Pos::new(x, y)
    }

    /// Empty cell nearest (Manhattan, then row-major order) to [`Self::opposite_corner`].
    pub fn eval_spawn(&self) -> Pos {
        let corner = self.opposite_corner();
        self.empty_cells()
            .min_by_key(|p| (p.manhattan(corner), self.index(*p)))
            .expect("task has at least one empty cell")
    }

    /// Cells reachable from `start` by walking through empty cells.
    ///
    /// Lava is impassable and the goal can be entered but not left.
    pub fn reachable_from(&self, start: Pos) -> Vec<bool> {
        let mut seen = vec![false; self.num_cells()];
        let mut queue = VecDeque::new();
        seen[self.index(start)] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            if self.is_terminal(p) {
                continue;
            }
            for a in Action::ALL {
                let q = self.move_from(p, a);
                let qi = self.index(q);
                if !seen[qi] && self.cell(q) != CellKind::Lava {
                    seen[qi] = true;
                    queue.push_back(q);
                }
            }
        }
        seen
    }

    /// ASCII dump with an optional agent marker `A`.
    pub fn render(&self, agent: Option<Pos>) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = Pos::new(x, y);
                if Some(p) == agent {
                    out.push('A');
                } else {
                    out.push(self.cell(p).to_char());
                }
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Debug for MazeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "MazeTask {}x{} difficulty={} seed={} goal={}",
            self.width, self.height, self.difficulty, self.seed, self.goal
        )?;
        f.write_str(&self.render(None))
    }
}

impl fmt::Display for MazeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(None))
    }
}

#[derive(Serialize, Deserialize)]
struct TaskJson {
    width: usize,
    height: usize,
    difficulty: f64,
    seed: u64,
    goal: [usize; 2],
    cells: Vec<String>,
}

impl From<MazeTask> for TaskJson {
    fn from(t: MazeTask) -> Self {
        let cells = t
            .cells
            .chunks(t.width)
            .map(|row| row.iter().map(|c| c.to_char()).collect())
            .collect();
        TaskJson {
            width: t.width,
            height: t.height,
            difficulty: t.difficulty,
            seed: t.seed,
            goal: [t.goal.x, t.goal.y],
            cells,
        }
    }
}

impl TryFrom<TaskJson> for MazeTask {
    type Error = Error;

    fn try_from(j: TaskJson) -> Result<Self> {
        if j.width == 0 || j.height == 0 {
            return Err(Error::MalformedTask("empty grid".into()));
        }
        if j.cells.len() != j.height {
            return Err(Error::MalformedTask(format!(
                "expected {} rows, found {}",
                j.height,
                j.cells.len()
            )));
        }
        let mut cells = Vec::with_capacity(j.width * j.height);
        for (y, row) in j.cells.iter().enumerate() {
            let before = cells.len();
            for c in row.chars() {
                let kind = CellKind::from_char(c).ok_or_else(|| {
                    Error::MalformedTask(format!("unknown cell {c:?} in row {y}"))
                })?;
                cells.push(kind);
            }
            if cells.len() - before != j.width {
                return Err(Error::MalformedTask(format!(
                    "row {y} has {} cells, expected {}",
                    cells.len() - before,
                    j.width
                )));
            }
        }
        let goals: Vec<usize> = (0..cells.len())
            .filter(|&i| cells[i] == CellKind::Goal)
            .collect();
        let goal = Pos::new(j.goal[0], j.goal[1]);
        if goals.len() != 1 || goals[0] != goal.y * j.width + goal.x {
            return Err(Error::MalformedTask(
                "exactly one goal cell matching the goal coordinate is required".into(),
            ));
        }
        if !cells.contains(&CellKind::Empty) {
            return Err(Error::MalformedTask("no empty cell".into()));
        }
        Ok(MazeTask {
            width: j.width,
            height: j.height,
            cells,
            goal,
            difficulty: j.difficulty,
            seed: j.seed,
        })
    }
}

/// Samples a maze where each free cell is lava with probability `difficulty`,
/// guaranteeing an empty path from the evaluation spawn to the goal.
pub fn generate_task(width: usize, height: usize, difficulty: f64, seed: u64) -> Result<MazeTask> {
    if width < 4 || height < 4 {
        return Err(Error::InvalidConfig(format!(
            "grid must be at least 4x4, got {width}x{height}"
        )));
    }
    if !(0.0..1.0).contains(&difficulty) {
        return Err(Error::InvalidConfig(format!(
            "difficulty must lie in [0, 1), got {difficulty}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let corner_x = if rng.random_bool(0.5) { 0 } else { width - 1 };
    let corner_y = if rng.random_bool(0.5) { 0 } else { height - 1 };
    let xs = if corner_x == 0 {
        0..width / 2
    } else {
        width - width / 2..width
    };
    let ys = if corner_y == 0 {
        0..height / 2
    } else {
        height - height / 2..height
    };
    let perimeter: Vec<Pos> = ys
        .flat_map(|y| xs.clone().map(move |x| Pos::new(x, y)))
        .filter(|p| p.x == 0 || p.y == 0 || p.x == width - 1 || p.y == height - 1)
        .collect();
    let goal = perimeter[rng.random_range(0..perimeter.len())];
    let spawn = Pos::new(width - 1 - corner_x, height - 1 - corner_y);

    let mut task = MazeTask {
        width,
        height,
        cells: vec![CellKind::Empty; width * height],
        goal,
        difficulty,
        seed,
    };
    for _ in 0..MAX_RESAMPLES {
        for i in 0..task.cells.len() {
            let p = task.pos(i);
            task.cells[i] = if p == goal {
                CellKind::Goal
            } else if p == spawn {
                CellKind::Empty
            } else if rng.random::<f64>() < difficulty {
                CellKind::Lava
            } else {
                CellKind::Empty
            };
        }
        if task.reachable_from(spawn)[task.index(goal)] {
            return Ok(task);
        }
    }

    // Carve a random monotone corridor from the spawn to the goal.
    let mut p = spawn;
    while p != goal {
        let need_x = p.x != goal.x;
        let need_y = p.y != goal.y;
        let along_x = need_x && (!need_y || rng.random_bool(0.5));
        p = if along_x {
            Pos::new(if goal.x > p.x { p.x + 1 } else { p.x - 1 }, p.y)
        } else {
            Pos::new(p.x, if goal.y > p.y { p.y + 1 } else { p.y - 1 })
        };
        let i = task.index(p);
        if task.cells[i] == CellKind::Lava {
            task.cells[i] = CellKind::Empty;
        }
    }
    if task.reachable_from(spawn)[task.index(goal)] {
        Ok(task)
    } else {
        Err(Error::GenerationFailure { seed, difficulty })
    }
}

/// Advances the environment by one interaction.
///
/// With probability `noise` the intended action is replaced by a uniformly
/// random one; the returned transition records the intended action.
pub fn step<R: Rng + ?Sized>(
    task: &MazeTask,
    state: EnvState,
    action: Action,
    noise: f64,
    rng: &mut R,
) -> Result<Transition> {
    if state.terminated {
        return Err(Error::SteppedTerminalState {
            x: state.position.x,
            y: state.position.y,
        });
    }
    let executed = if noise > 0.0 && rng.random_bool(noise) {
        Action::from_index(rng.random_range(0..Action::COUNT))
    } else {
        action
    };
    let next = task.state_at(task.move_from(state.position, executed));
    let reward = if task.cell(next.position) == CellKind::Goal {
        1.0
    } else {
        0.0
    };
    Ok(Transition {
        state,
        action,
        reward,
        next_state: next,
        terminal: next.terminated,
    })
}

pub fn initial_state<R: Rng + ?Sized>(task: &MazeTask, mode: SpawnMode, rng: &mut R) -> EnvState {
    match mode {
        SpawnMode::EvalOpposite => EnvState::alive(task.eval_spawn()),
        SpawnMode::TrainUniform => {
            let empties: Vec<Pos> = task.empty_cells().collect();
            EnvState::alive(empties[rng.random_range(0..empties.len())])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_difficulty_is_all_empty_but_goal() {
        for seed in 0..20 {
            let t = generate_task(4, 4, 0.0, seed).unwrap();
            let goals = t.cells().iter().filter(|&&c| c == CellKind::Goal).count();
            let lava = t.cells().iter().filter(|&&c| c == CellKind::Lava).count();
            assert_eq!((goals, lava), (1, 0));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(12, 12, 0.4, 7).unwrap();
        let b = generate_task(12, 12, 0.4, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_task(12, 12, 0.4, 8).unwrap());
    }

    #[test]
    fn spawn_connects_to_goal() {
        for seed in 0..50 {
            let t = generate_task(8, 8, 0.55, seed).unwrap();
            let spawn = t.eval_spawn();
            assert_eq!(t.cell(spawn), CellKind::Empty);
            assert!(t.reachable_from(spawn)[t.index(t.goal())], "seed {seed}");
        }
    }

    #[test]
    fn goal_and_spawn_sit_in_opposite_quadrants() {
        for seed in 0..50 {
            let t = generate_task(12, 12, 0.4, seed).unwrap();
            let g = t.goal();
            assert!(g.x == 0 || g.y == 0 || g.x == 11 || g.y == 11);
            let s = t.eval_spawn();
            assert_eq!(s, t.opposite_corner());
            assert!((g.x < 6) != (s.x < 6) && (g.y < 6) != (s.y < 6));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(
            generate_task(3, 8, 0.1, 0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            generate_task(8, 8, 1.0, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn corridor_fallback_still_connects() {
        // At 0.95 nearly every grid is disconnected, so the carve path runs.
        let t = generate_task(10, 10, 0.95, 11).unwrap();
        assert!(t.reachable_from(t.eval_spawn())[t.index(t.goal())]);
    }

    #[test]
    fn deterministic_moves() {
        let t = MazeTask::from_rows(&["....", ".L..", "...G", "...."], 0.0, 0).unwrap();
        let mut r = rng(0);
        let s = EnvState::alive(Pos::new(0, 0));
        let tr = step(&t, s, Action::Right, 0.0, &mut r).unwrap();
        assert_eq!(tr.next_state, EnvState::alive(Pos::new(1, 0)));
        assert_eq!((tr.reward, tr.terminal), (0.0, false));

        let wall = step(&t, s, Action::Up, 0.0, &mut r).unwrap();
        assert_eq!(wall.next_state.position, Pos::new(0, 0));

        let g = step(&t, EnvState::alive(Pos::new(3, 1)), Action::Down, 0.0, &mut r).unwrap();
        assert_eq!((g.reward, g.terminal), (1.0, true));

        let lava = step(&t, EnvState::alive(Pos::new(1, 0)), Action::Down, 0.0, &mut r).unwrap();
        assert_eq!((lava.reward, lava.terminal), (0.0, true));

        assert!(matches!(
            step(&t, lava.next_state, Action::Up, 0.0, &mut r),
            Err(Error::SteppedTerminalState { .. })
        ));
    }

    #[test]
    fn noisy_action_mixture() {
        // Executed-action law is 0.9 * intended + 0.1 * uniform.
        let t = generate_task(8, 8, 0.0, 1).unwrap();
        let centre = EnvState::alive(Pos::new(3, 3));
        assert_eq!(t.cell(centre.position), CellKind::Empty);
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut r = rng(5);
        for _ in 0..n {
            let tr = step(&t, centre, Action::Right, 0.1, &mut r).unwrap();
            let d = (
                tr.next_state.position.x as isize - 3,
                tr.next_state.position.y as isize - 3,
            );
            let a = Action::ALL.iter().position(|a| a.delta() == d).unwrap();
            counts[a] += 1;
        }
        let expected = [0.025, 0.025, 0.025, 0.925];
        for (c, p) in counts.iter().zip(expected) {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let freq = *c as f64 / n as f64;
            assert!((freq - p).abs() < 3.0 * sigma, "{freq} vs {p}");
        }
    }

    #[test]
    fn eval_spawn_is_stable() {
        let t = generate_task(12, 12, 0.4, 3).unwrap();
        let mut r = rng(1);
        let a = initial_state(&t, SpawnMode::EvalOpposite, &mut r);
        let b = initial_state(&t, SpawnMode::EvalOpposite, &mut r);
        assert_eq!(a, b);
    }

    #[test]
    fn train_spawn_is_uniform() {
        let t = generate_task(4, 4, 0.3, 2).unwrap();
        let empties: Vec<Pos> = t.empty_cells().collect();
        let n = 10_000;
        let mut counts = vec![0usize; t.num_cells()];
        let mut r = rng(9);
        for _ in 0..n {
            let s = initial_state(&t, SpawnMode::TrainUniform, &mut r);
            assert!(!t.is_terminal(s.position));
            counts[t.index(s.position)] += 1;
        }
        let expected = n as f64 / empties.len() as f64;
        let chi2: f64 = empties
            .iter()
            .map(|p| {
                let o = counts[t.index(*p)] as f64;
                (o - expected).powi(2) / expected
            })
            .sum();
        // 99.9% quantile of chi-squared with up to 14 degrees of freedom.
        assert!(chi2 < 36.1, "chi2 = {chi2} over {} cells", empties.len());
    }

    #[test]
    fn json_round_trip() {
        let t = generate_task(12, 12, 0.4, 7).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let back: MazeTask = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
        assert_eq!(s, serde_json::to_string(&back).unwrap());
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["cells"].as_array().unwrap().len(), 12);
        assert_eq!(v["goal"][0].as_u64().unwrap() as usize, t.goal().x);
    }

    #[test]
    fn json_rejects_two_goals() {
        let bad = r#"{"width":4,"height":1,"difficulty":0,"seed":0,"goal":[0,0],"cells":["G..G"]}"#;
        assert!(serde_json::from_str::<MazeTask>(bad).is_err());
    }
}
