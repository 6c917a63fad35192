//! Deterministic discrete maze environment: poses, seven-action dynamics,
//! the +10 / -0.05 reward protocol, ray-cast observation synthesis, and
//! ground-truth oracles (BFS geodesics) used only by tests and evaluation.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};

/// Number of ray directions in an observation.
pub const N_RAYS: usize = 12;
/// Number of wall texture classes.
pub const N_TEXTURES: usize = 8;
/// Observation feature length: depth + one-hot texture + sin/cos bearing per ray.
pub const OBS_DIM: usize = 3 * N_RAYS + N_RAYS * N_TEXTURES;

pub const GOAL_REWARD: f64 = 10.0;
pub const STEP_PENALTY: f64 = -0.05;
/// Default episode length before the step counter resets.
pub const DEFAULT_EPISODE_LEN: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub fn vec(self) -> (i32, i32) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }

    pub fn left(self) -> Heading {
        match self {
            Heading::N => Heading::W,
            Heading::W => Heading::S,
            Heading::S => Heading::E,
            Heading::E => Heading::N,
        }
    }

    pub fn right(self) -> Heading {
        self.left().left().left()
    }

    /// Angle in radians with x to the right and y downward (E = 0, S = pi/2).
    pub fn angle(self) -> f64 {
        use std::f64::consts::FRAC_PI_2;
        match self {
            Heading::E => 0.0,
            Heading::S => FRAC_PI_2,
            Heading::W => 2.0 * FRAC_PI_2,
            Heading::N => 3.0 * FRAC_PI_2,
        }
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Heading::N => 'N',
            Heading::E => 'E',
            Heading::S => 'S',
            Heading::W => 'W',
        };
        write!(f, "{c}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentPose {
    pub cell: Cell,
    pub heading: Heading,
}

/// The seven discrete actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    MoveForward,
    MoveBackward,
    MoveLeft,
    MoveRight,
    TurnLeft,
    TurnRight,
    NotMove,
}

pub const N_ACTIONS: usize = 7;

impl Action {
    pub fn from_index(i: usize) -> Result<Action> {
        Ok(match i {
            0 => Action::MoveForward,
            1 => Action::MoveBackward,
            2 => Action::MoveLeft,
            3 => Action::MoveRight,
            4 => Action::TurnLeft,
            5 => Action::TurnRight,
            6 => Action::NotMove,
            _ => {
                return Err(GamError::Precondition(format!(
                    "invalid action index {i} (valid: 0..7)"
                )))
            }
        })
    }

    pub fn index(self) -> usize {
        match self {
            Action::MoveForward => 0,
            Action::MoveBackward => 1,
            Action::MoveLeft => 2,
            Action::MoveRight => 3,
            Action::TurnLeft => 4,
            Action::TurnRight => 5,
            Action::NotMove => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tile {
    Free,
    Wall { texture: u8 },
}

/// Immutable maze description parsed from the ASCII format:
/// `#` wall (texture 0), `1`-`7` wall with that texture, `.` free,
/// `S` spawn, `G` goal.
#[derive(Debug, Clone)]
pub struct MazeSpec {
    pub width: usize,
    pub height: usize,
    tiles: Vec<Tile>,
    pub spawn_poses: Vec<AgentPose>,
    pub goal_cell: Cell,
}

impl MazeSpec {
    fn tile(&self, x: i32, y: i32) -> Tile {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            // outside is wall; borders are validated as walls anyway
            return Tile::Wall { texture: 0 };
        }
        self.tiles[y as usize * self.width + x as usize]
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        matches!(self.tile(cell.x, cell.y), Tile::Free)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut v = Vec::new();
        for y in 0..self.height as i32 {
            for x in 0..self.width as i32 {
                if self.is_free(Cell::new(x, y)) {
                    v.push(Cell::new(x, y));
                }
            }
        }
        v
    }

    pub fn wall_texture(&self, cell: Cell) -> Option<u8> {
        match self.tile(cell.x, cell.y) {
            Tile::Wall { texture } => Some(texture),
            Tile::Free => None,
        }
    }

    fn d_max(&self) -> f64 {
        self.width.max(self.height) as f64
    }

    /// Clone with a different goal cell (for relocated-goal evaluation).
    /// The new goal must be a free cell.
    pub fn with_goal(&self, goal: Cell) -> Result<MazeSpec> {
        if !self.is_free(goal) {
            return Err(GamError::Maze(format!(
                "goal ({}, {}) is not a free cell",
                goal.x, goal.y
            )));
        }
        let mut m = self.clone();
        m.goal_cell = goal;
        Ok(m)
    }
}

/// Parse and validate a maze from its ASCII form.
pub fn load_maze(text: &str) -> Result<MazeSpec> {
    let rows: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    if rows.is_empty() {
        return Err(GamError::Maze("empty maze".into()));
    }
    let width = rows[0].chars().count();
    let height = rows.len();
    for (y, r) in rows.iter().enumerate() {
        if r.chars().count() != width {
            return Err(GamError::Maze(format!(
                "non-rectangular input: row {y} has {} cells, expected {width}",
                r.chars().count()
            )));
        }
    }
    let mut tiles = vec![Tile::Free; width * height];
    let mut spawns = Vec::new();
    let mut goal = None;
    for (y, r) in rows.iter().enumerate() {
        for (x, c) in r.chars().enumerate() {
            let t = match c {
                '#' => Tile::Wall { texture: 0 },
                '0'..='7' => Tile::Wall {
                    texture: c as u8 - b'0',
                },
                '.' => Tile::Free,
                'S' => {
                    spawns.push(AgentPose {
                        cell: Cell::new(x as i32, y as i32),
                        heading: Heading::N,
                    });
                    Tile::Free
                }
                'G' => {
                    goal = Some(Cell::new(x as i32, y as i32));
                    Tile::Free
                }
                _ => return Err(GamError::Maze(format!("unknown cell char '{c}' at ({x},{y})"))),
            };
            tiles[y * width + x] = t;
        }
    }
    let goal_cell = goal.ok_or_else(|| GamError::Maze("missing goal".into()))?;
    let spec = MazeSpec {
        width,
        height,
        tiles,
        spawn_poses: spawns,
        goal_cell,
    };
    // borders must be walls so ray casts always terminate
    for x in 0..width as i32 {
        if spec.is_free(Cell::new(x, 0)) || spec.is_free(Cell::new(x, height as i32 - 1)) {
            return Err(GamError::Maze("border must be wall".into()));
        }
    }
    for y in 0..height as i32 {
        if spec.is_free(Cell::new(0, y)) || spec.is_free(Cell::new(width as i32 - 1, y)) {
            return Err(GamError::Maze("border must be wall".into()));
        }
    }
    // one connected component of free cells
    let free = spec.free_cells();
    if free.is_empty() {
        return Err(GamError::Maze("no free cells".into()));
    }
    let mut seen = vec![false; width * height];
    let mut q = VecDeque::new();
    let start = free[0];
    seen[start.y as usize * width + start.x as usize] = true;
    q.push_back(start);
    let mut count = 1;
    while let Some(c) = q.pop_front() {
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let n = Cell::new(c.x + dx, c.y + dy);
            if spec.is_free(n) && !seen[n.y as usize * width + n.x as usize] {
                seen[n.y as usize * width + n.x as usize] = true;
                count += 1;
                q.push_back(n);
            }
        }
    }
    if count != free.len() {
        return Err(GamError::Maze(format!(
            "disconnected free space: {} of {} cells reachable",
            count,
            free.len()
        )));
    }
    Ok(spec)
}

/// Pure pose dynamics, no reward. Blocked moves leave the pose unchanged.
pub fn apply_action(maze: &MazeSpec, pose: AgentPose, action: Action) -> AgentPose {
    let h = pose.heading;
    let translate = |dir: (i32, i32)| {
        let target = Cell::new(pose.cell.x + dir.0, pose.cell.y + dir.1);
        if maze.is_free(target) {
            AgentPose {
                cell: target,
                heading: h,
            }
        } else {
            pose
        }
    };
    match action {
        Action::MoveForward => translate(h.vec()),
        Action::MoveBackward => {
            let v = h.vec();
            translate((-v.0, -v.1))
        }
        Action::MoveLeft => translate(h.left().vec()),
        Action::MoveRight => translate(h.right().vec()),
        Action::TurnLeft => AgentPose {
            cell: pose.cell,
            heading: h.left(),
        },
        Action::TurnRight => AgentPose {
            cell: pose.cell,
            heading: h.right(),
        },
        Action::NotMove => pose,
    }
}

/// Observation feature vector: per ray, normalized wall distance, one-hot
/// texture of the hit wall, and sin/cos of the absolute ray bearing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
}

/// Cast a ray with grid DDA from the center of `from`; returns the first
/// wall cell hit and the center-to-center distance.
fn cast_ray(maze: &MazeSpec, from: Cell, angle: f64) -> (Cell, f64) {
    let (dx, dy) = (angle.cos(), angle.sin());
    let ox = from.x as f64 + 0.5;
    let oy = from.y as f64 + 0.5;
    let mut cx = from.x;
    let mut cy = from.y;
    let step_x: i32 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i32 = if dy > 0.0 { 1 } else { -1 };
    let mut t_max_x = if dx.abs() < 1e-12 {
        f64::INFINITY
    } else {
        let next = if dx > 0.0 { cx as f64 + 1.0 } else { cx as f64 };
        (next - ox) / dx
    };
    let mut t_max_y = if dy.abs() < 1e-12 {
        f64::INFINITY
    } else {
        let next = if dy > 0.0 { cy as f64 + 1.0 } else { cy as f64 };
        (next - oy) / dy
    };
    let t_delta_x = if dx.abs() < 1e-12 { f64::INFINITY } else { 1.0 / dx.abs() };
    let t_delta_y = if dy.abs() < 1e-12 { f64::INFINITY } else { 1.0 / dy.abs() };
    loop {
        if t_max_x < t_max_y {
            t_max_x += t_delta_x;
            cx += step_x;
        } else {
            t_max_y += t_delta_y;
            cy += step_y;
        }
        let cell = Cell::new(cx, cy);
        if !maze.is_free(cell) {
            let d = (((cx - from.x).pow(2) + (cy - from.y).pow(2)) as f64).sqrt();
            return (cell, d);
        }
    }
}

/// Render the observation for a pose. Gaussian noise of `noise_sigma` is
/// added to depth channels only, then re-clipped to [0,1].
pub fn render_observation<R: Rng>(
    maze: &MazeSpec,
    pose: AgentPose,
    noise_sigma: f64,
    rng: &mut R,
) -> Observation {
    let d_max = maze.d_max();
    let base = pose.heading.angle();
    let mut depths = [0.0f64; N_RAYS];
    let mut tex = [0usize; N_RAYS];
    let mut bearings = [0.0f64; N_RAYS];
    for k in 0..N_RAYS {
        let bearing = base + k as f64 * std::f64::consts::TAU / N_RAYS as f64;
        let (hit, d) = cast_ray(maze, pose.cell, bearing);
        depths[k] = (d / d_max).clamp(0.0, 1.0);
        tex[k] = maze.wall_texture(hit).unwrap_or(0) as usize;
        bearings[k] = bearing;
    }
    let mut features = Vec::with_capacity(OBS_DIM);
    for k in 0..N_RAYS {
        let mut v = depths[k];
        if noise_sigma > 0.0 {
            // Box-Muller normal draw
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            v += noise_sigma * z;
        }
        features.push(v.clamp(0.0, 1.0));
    }
    for k in 0..N_RAYS {
        for t in 0..N_TEXTURES {
            features.push(if tex[k] == t { 1.0 } else { 0.0 });
        }
    }
    for k in 0..N_RAYS {
        features.push(bearings[k].sin());
        features.push(bearings[k].cos());
    }
    debug_assert_eq!(features.len(), OBS_DIM);
    Observation { features }
}

/// BFS shortest path length in cells; `None` if unreachable.
pub fn geodesic_distance(maze: &MazeSpec, a: Cell, b: Cell) -> Result<Option<u32>> {
    if !maze.is_free(a) || !maze.is_free(b) {
        return Err(GamError::Precondition(format!(
            "geodesic endpoints must be free cells (a=({},{}), b=({},{}))",
            a.x, a.y, b.x, b.y
        )));
    }
    if a == b {
        return Ok(Some(0));
    }
    let mut dist = vec![u32::MAX; maze.width * maze.height];
    let idx = |c: Cell| c.y as usize * maze.width + c.x as usize;
    dist[idx(a)] = 0;
    let mut q = VecDeque::new();
    q.push_back(a);
    while let Some(c) = q.pop_front() {
        let d = dist[idx(c)];
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let n = Cell::new(c.x + dx, c.y + dy);
            if maze.is_free(n) && dist[idx(n)] == u32::MAX {
                dist[idx(n)] = d + 1;
                if n == b {
                    return Ok(Some(d + 1));
                }
                q.push_back(n);
            }
        }
    }
    Ok(None)
}

/// Per-step environment output. `pose` carries ground truth and is only
/// for oracles (tests, evaluation exports); policies must not read it.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub respawned: bool,
    pub pose: AgentPose,
}

/// A live environment instance. `MazeSpec` is shared and immutable;
/// per-instance RNG state is owned by this instance.
pub struct Env {
    pub maze: Arc<MazeSpec>,
    pub pose: AgentPose,
    pub steps_taken: usize,
    pub episode_len: usize,
    pub noise_sigma: f64,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(maze: Arc<MazeSpec>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = maze.spawn_poses[rng.gen_range(0..maze.spawn_poses.len())];
        Self {
            maze,
            pose,
            steps_taken: 0,
            episode_len: DEFAULT_EPISODE_LEN,
            noise_sigma: 0.0,
            rng,
        }
    }

    pub fn reset_to(&mut self, pose: AgentPose) {
        self.pose = pose;
        self.steps_taken = 0;
    }

    pub fn observe(&mut self) -> Observation {
        render_observation(&self.maze, self.pose, self.noise_sigma, &mut self.rng)
    }

    /// Whether the episode step counter has reached the configured length.
    pub fn episode_over(&self) -> bool {
        self.steps_taken >= self.episode_len
    }

    /// Reset the step counter and respawn for a fresh episode.
    pub fn begin_episode(&mut self) {
        self.steps_taken = 0;
        let i = self.rng.gen_range(0..self.maze.spawn_poses.len());
        self.pose = self.maze.spawn_poses[i];
    }

    pub fn step(&mut self, action: Action) -> StepResult {
        let new_pose = apply_action(&self.maze, self.pose, action);
        self.steps_taken += 1;
        let (reward, respawned) = if new_pose.cell == self.maze.goal_cell {
            let i = self.rng.gen_range(0..self.maze.spawn_poses.len());
            self.pose = self.maze.spawn_poses[i];
            (GOAL_REWARD, true)
        } else {
            self.pose = new_pose;
            (STEP_PENALTY, false)
        };
        let observation =
            render_observation(&self.maze, self.pose, self.noise_sigma, &mut self.rng);
        StepResult {
            observation,
            reward,
            respawned,
            pose: self.pose,
        }
    }
}

/// Exploration policy used when collecting the database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplorePolicy {
    Random,
    WallFollow,
}

/// One recorded exploration step. The pose is ground truth held out for
/// evaluation oracles only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DbStep {
    pub traj_id: usize,
    pub t: usize,
    pub features: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub x: i32,
    pub y: i32,
    pub h: Heading,
}

impl From<AgentPose> for PoseRecord {
    fn from(p: AgentPose) -> Self {
        PoseRecord {
            x: p.cell.x,
            y: p.cell.y,
            h: p.heading,
        }
    }
}

/// Ordered exploration trajectories. Trajectory boundaries are recorded
/// when respawns occur.
#[derive(Debug, Clone, Default)]
pub struct ExplorationDB {
    pub steps: Vec<DbStep>,
}

impl ExplorationDB {
    /// Steps grouped by trajectory, in order.
    pub fn trajectories(&self) -> Vec<&[DbStep]> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.steps.len() {
            if i == self.steps.len() || self.steps[i].traj_id != self.steps[start].traj_id {
                out.push(&self.steps[start..i]);
                start = i;
            }
        }
        out
    }

    pub fn to_jsonl(&self, blind: bool) -> Result<String> {
        let mut s = String::new();
        for step in &self.steps {
            let mut rec = step.clone();
            if blind {
                rec.pose = None;
            }
            s.push_str(&serde_json::to_string(&rec)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            steps.push(serde_json::from_str::<DbStep>(line)?);
        }
        Ok(Self { steps })
    }

    /// Fraction of the maze's free cells visited, from oracle poses.
    pub fn coverage(&self, maze: &MazeSpec) -> f64 {
        let mut visited = std::collections::HashSet::new();
        for s in &self.steps {
            if let Some(p) = s.pose {
                visited.insert((p.x, p.y));
            }
        }
        visited.len() as f64 / maze.free_cells().len() as f64
    }
}

/// Horizon bound used when validating exploration length (steps must be
/// at least `T_MAX + 1` so at least one positive pair exists).
pub const T_MAX_DEFAULT: usize = 20;

/// Run an exploration policy for `steps` env steps and record observations
/// with hidden ground-truth poses.
pub fn explore_collect(
    maze: &Arc<MazeSpec>,
    policy: ExplorePolicy,
    steps: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<ExplorationDB> {
    if steps < T_MAX_DEFAULT + 1 {
        return Err(GamError::Precondition(format!(
            "explore steps must be >= {} to yield labeled pairs, got {steps}",
            T_MAX_DEFAULT + 1
        )));
    }
    let mut env = Env::new(maze.clone(), seed);
    env.noise_sigma = noise_sigma;
    env.episode_len = usize::MAX; // exploration ignores episode truncation
    let mut policy_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut db = ExplorationDB::default();
    let mut traj_id = 0;
    let obs = env.observe();
    db.steps.push(DbStep {
        traj_id,
        t: 0,
        features: obs.features,
        pose: Some(env.pose.into()),
    });
    for t in 1..=steps {
        let action = match policy {
            ExplorePolicy::Random => {
                Action::from_index(policy_rng.gen_range(0..N_ACTIONS)).unwrap()
            }
            ExplorePolicy::WallFollow => wall_follow_action(&env.maze, env.pose),
        };
        let res = env.step(action);
        if res.respawned {
            traj_id += 1;
        }
        db.steps.push(DbStep {
            traj_id,
            t,
            features: res.observation.features,
            pose: Some(res.pose.into()),
        });
    }
    Ok(db)
}

/// Right-hand wall following on the grid.
fn wall_follow_action(maze: &MazeSpec, pose: AgentPose) -> Action {
    let fwd = pose.heading.vec();
    let right = pose.heading.right().vec();
    let right_free = maze.is_free(Cell::new(pose.cell.x + right.0, pose.cell.y + right.1));
    let fwd_free = maze.is_free(Cell::new(pose.cell.x + fwd.0, pose.cell.y + fwd.1));
    if right_free {
        Action::TurnRight
    } else if fwd_free {
        Action::MoveForward
    } else {
        Action::TurnLeft
    }
}

pub fn bundled_maze_small() -> MazeSpec {
    load_maze(include_str!("../fixtures/maze-small.txt")).expect("bundled maze-small is valid")
}

pub fn bundled_maze_large() -> MazeSpec {
    load_maze(include_str!("../fixtures/maze-large.txt")).expect("bundled maze-large is valid")
}
