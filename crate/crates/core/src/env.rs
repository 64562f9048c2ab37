//! Deterministic grid-world MDPs with dynamic obstacles.
//!
//! The environment family is intentionally small: rectangular grids with
//! walls, terminal goal cells, a start distribution, and *dynamic obstacle
//! regions* that solidify when the agent is near them (Chebyshev proximity).
//! Two optional extensions — per-(cell, action) reward bonuses and an
//! exogenous drift that overrides movement — exist so the value-aggregation
//! equivalence suite has non-degenerate MDPs whose state distribution does
//! not depend on the policy.
//!
//! Coordinates: `(x, y)` with `y` increasing upward; the text layout format
//! lists rows top to bottom. `Up` therefore moves from `(0,0)` to `(0,1)`.

use crate::seed;
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    /// Layout text is malformed; carries the 0-based row/column location.
    #[error("layout parse error at row {row}, col {col}: {msg}")]
    ParseError { row: usize, col: usize, msg: String },
    /// A goal cell cannot be reached from the start support.
    #[error("goal at ({x},{y}) unreachable from start", x = .0.x, y = .0.y)]
    UnreachableGoal(Cell),
    /// `step` was invoked on a terminal cell.
    #[error("cannot step from terminal cell ({x},{y})", x = .0.x, y = .0.y)]
    SteppedTerminal(Cell),
    /// Obstacle region touches a wall/goal cell or leaves the grid.
    #[error("invalid obstacle region: {0}")]
    InvalidRegion(String),
    /// Construction-time invariant violation (start mass, γ range, bounds…).
    #[error("invalid mdp: {0}")]
    Invalid(String),
}

/// Grid coordinates; `y` grows upward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    /// Chebyshev (chessboard) distance.
    pub fn chebyshev(self, other: Cell) -> usize {
        let dx = self.x.abs_diff(other.x);
        let dy = self.y.abs_diff(other.y);
        dx.max(dy)
    }
}

/// Movement actions in fixed tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, 1),
            Action::Down => (0, -1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        }
    }
}

/// A dynamic obstacle: a set of free cells that behave as walls whenever the
/// agent is within `radius` (Chebyshev) of the region.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleSpec {
    region: BTreeSet<Cell>,
    radius: usize,
}

impl ObstacleSpec {
    /// Default proximity radius: the region solidifies as soon as the agent
    /// stands next to it (including diagonally), so direct entry is blocked.
    pub const DEFAULT_RADIUS: usize = 1;

    pub fn new(region: BTreeSet<Cell>, radius: usize) -> Self {
        Self { region, radius }
    }

    pub fn with_default_radius(region: BTreeSet<Cell>) -> Self {
        Self::new(region, Self::DEFAULT_RADIUS)
    }

    pub fn region(&self) -> &BTreeSet<Cell> {
        &self.region
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Whether the obstacle is solid from the agent's current position.
    pub fn active_from(&self, agent: Cell) -> bool {
        self.region
            .iter()
            .any(|c| c.chebyshev(agent) <= self.radius)
    }
}

/// Outcome of one environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub next: Cell,
    pub reward: f64,
    pub terminal: bool,
}

/// Deterministic grid MDP.
#[derive(Debug, Clone)]
pub struct GridMdp {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    start: Vec<(Cell, f64)>,
    goals: BTreeMap<Cell, f64>,
    step_reward: f64,
    gamma: f64,
    obstacles: Vec<ObstacleSpec>,
    labeled_regions: BTreeMap<u8, BTreeSet<Cell>>,
    action_bonus: BTreeMap<(Cell, Action), f64>,
    drift: Option<Action>,
}

/// Assembles a [`GridMdp`], validating invariants at `build`.
#[derive(Debug, Clone)]
pub struct GridMdpBuilder {
    width: usize,
    height: usize,
    walls: BTreeSet<Cell>,
    start: Vec<(Cell, f64)>,
    goals: BTreeMap<Cell, f64>,
    step_reward: f64,
    gamma: f64,
    labeled_regions: BTreeMap<u8, BTreeSet<Cell>>,
    action_bonus: BTreeMap<(Cell, Action), f64>,
    drift: Option<Action>,
}

impl GridMdpBuilder {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            walls: BTreeSet::new(),
            start: Vec::new(),
            goals: BTreeMap::new(),
            step_reward: -1.0,
            gamma: 0.95,
            labeled_regions: BTreeMap::new(),
            action_bonus: BTreeMap::new(),
            drift: None,
        }
    }

    pub fn wall(mut self, cell: Cell) -> Self {
        self.walls.insert(cell);
        self
    }

    pub fn start(mut self, cell: Cell) -> Self {
        self.start = vec![(cell, 1.0)];
        self
    }

    pub fn start_distribution(mut self, dist: Vec<(Cell, f64)>) -> Self {
        self.start = dist;
        self
    }

    pub fn goal(mut self, cell: Cell, reward: f64) -> Self {
        self.goals.insert(cell, reward);
        self
    }

    pub fn step_reward(mut self, r: f64) -> Self {
        self.step_reward = r;
        self
    }

    pub fn gamma(mut self, g: f64) -> Self {
        self.gamma = g;
        self
    }

    pub fn labeled_region(mut self, label: u8, region: BTreeSet<Cell>) -> Self {
        self.labeled_regions.insert(label, region);
        self
    }

    /// Extra reward added to `step_reward` when `action` is taken in `cell`.
    pub fn action_bonus(mut self, cell: Cell, action: Action, bonus: f64) -> Self {
        self.action_bonus.insert((cell, action), bonus);
        self
    }

    /// Every action moves as `drift` regardless of what was commanded
    /// (transitions become policy-independent; rewards still see the
    /// commanded action).
    pub fn exogenous_drift(mut self, drift: Action) -> Self {
        self.drift = Some(drift);
        self
    }

    pub fn build(self) -> Result<GridMdp, EnvError> {
        if self.width == 0 || self.height == 0 {
            return Err(EnvError::Invalid("grid must be non-empty".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(EnvError::Invalid(format!("gamma {} not in (0,1)", self.gamma)));
        }
        if !self.step_reward.is_finite() {
            return Err(EnvError::Invalid("non-finite step reward".into()));
        }
        let inside = |c: &Cell| c.x < self.width && c.y < self.height;
        for c in &self.walls {
            if !inside(c) {
                return Err(EnvError::Invalid(format!("wall ({},{}) outside grid", c.x, c.y)));
            }
        }
        for (c, r) in &self.goals {
            if !inside(c) {
                return Err(EnvError::Invalid(format!("goal ({},{}) outside grid", c.x, c.y)));
            }
            if self.walls.contains(c) {
                return Err(EnvError::Invalid(format!("goal ({},{}) is a wall", c.x, c.y)));
            }
            if !r.is_finite() {
                return Err(EnvError::Invalid("non-finite goal reward".into()));
            }
        }
        if self.goals.is_empty() {
            return Err(EnvError::Invalid("at least one goal required".into()));
        }
        if self.start.is_empty() {
            return Err(EnvError::Invalid("empty start distribution".into()));
        }
        let mass: f64 = self.start.iter().map(|(_, p)| p).sum();
        if (mass - 1.0).abs() > crate::tol::START_DISTRIBUTION_SUM {
            return Err(EnvError::Invalid(format!("start distribution sums to {mass}")));
        }
        for (c, p) in &self.start {
            if !inside(c) || self.walls.contains(c) {
                return Err(EnvError::Invalid(format!(
                    "start cell ({},{}) outside grid or on a wall",
                    c.x, c.y
                )));
            }
            if *p < 0.0 {
                return Err(EnvError::Invalid("negative start mass".into()));
            }
        }
        for b in self.action_bonus.values() {
            if !b.is_finite() {
                return Err(EnvError::Invalid("non-finite action bonus".into()));
            }
        }
        let mut walls = vec![false; self.width * self.height];
        for c in &self.walls {
            walls[c.y * self.width + c.x] = true;
        }
        Ok(GridMdp {
            width: self.width,
            height: self.height,
            walls,
            start: self.start,
            goals: self.goals,
            step_reward: self.step_reward,
            gamma: self.gamma,
            obstacles: Vec::new(),
            labeled_regions: self.labeled_regions,
            action_bonus: self.action_bonus,
            drift: self.drift,
        })
    }
}

impl GridMdp {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn step_reward(&self) -> f64 {
        self.step_reward
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        c.x >= self.width || c.y >= self.height || self.walls[c.y * self.width + c.x]
    }

    pub fn is_terminal(&self, c: Cell) -> bool {
        self.goals.contains_key(&c)
    }

    pub fn goal_reward(&self, c: Cell) -> f64 {
        self.goals.get(&c).copied().unwrap_or(0.0)
    }

    pub fn goals(&self) -> &BTreeMap<Cell, f64> {
        &self.goals
    }

    pub fn start_distribution(&self) -> &[(Cell, f64)] {
        &self.start
    }

    pub fn obstacles(&self) -> &[ObstacleSpec] {
        &self.obstacles
    }

    /// Obstacle regions named by layout digits (inactive until poisoned in).
    pub fn labeled_regions(&self) -> &BTreeMap<u8, BTreeSet<Cell>> {
        &self.labeled_regions
    }

    /// Largest single-step reward magnitude (stated reward bound).
    pub fn reward_bound(&self) -> f64 {
        let bonus = self
            .action_bonus
            .values()
            .fold(0.0f64, |acc, b| acc.max(b.abs()));
        let goal = self
            .goals
            .values()
            .fold(0.0f64, |acc, g| acc.max(g.abs()));
        (self.step_reward.abs() + bonus).max(goal)
    }

    /// All non-wall cells in row-major order (x fastest, y from the bottom).
    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                if !self.is_wall(c) {
                    out.push(c);
                }
            }
        }
        out
    }

    fn sample_start<R: Rng>(&self, rng: &mut R) -> Cell {
        if self.start.len() == 1 {
            return self.start[0].0;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (c, p) in &self.start {
            acc += p;
            if u < acc {
                return *c;
            }
        }
        self.start.last().expect("non-empty start").0
    }

    /// Draw a start cell from μ using the supplied stream.
    pub fn draw_start<R: Rng>(&self, rng: &mut R) -> Cell {
        self.sample_start(rng)
    }

    /// Whether moving from `from` into `target` is blocked by geometry or by
    /// an obstacle that is solid as seen from `from`.
    fn blocked(&self, from: Cell, target_x: isize, target_y: isize) -> Option<Cell> {
        if target_x < 0
            || target_y < 0
            || target_x as usize >= self.width
            || target_y as usize >= self.height
        {
            return None;
        }
        let t = Cell::new(target_x as usize, target_y as usize);
        if self.is_wall(t) {
            return None;
        }
        for o in &self.obstacles {
            if o.region.contains(&t) && o.active_from(from) {
                return None;
            }
        }
        Some(t)
    }

    /// One deterministic transition. `history` is the trajectory of cells
    /// visited *before* `cell`; obstacle activation looks at the current cell
    /// only, so the same `(cell, action, history)` always yields the same
    /// result. Stepping from a terminal cell is an error.
    pub fn step(&self, cell: Cell, action: Action, history: &[Cell]) -> Result<Step, EnvError> {
        let _ = history; // activation is a function of the current cell
        if self.is_terminal(cell) {
            return Err(EnvError::SteppedTerminal(cell));
        }
        if self.is_wall(cell) {
            return Err(EnvError::Invalid(format!("cell ({},{}) is a wall", cell.x, cell.y)));
        }
        Ok(self.transition(cell, action))
    }

    /// Transition used by planners; caller guarantees `cell` is free and
    /// non-terminal.
    pub(crate) fn transition(&self, cell: Cell, action: Action) -> Step {
        let moved = self.drift.unwrap_or(action);
        let (dx, dy) = moved.delta();
        let next = self
            .blocked(cell, cell.x as isize + dx, cell.y as isize + dy)
            .unwrap_or(cell);
        let bonus = self
            .action_bonus
            .get(&(cell, action))
            .copied()
            .unwrap_or(0.0);
        Step {
            next,
            reward: self.step_reward + bonus,
            terminal: self.is_terminal(next),
        }
    }

    /// Cells reachable from the start support by legal moves (obstacles
    /// ignored; they are dynamic and may be absent).
    fn reachable(&self) -> BTreeSet<Cell> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::new();
        for (c, p) in &self.start {
            if *p > 0.0 && seen.insert(*c) {
                queue.push_back(*c);
            }
        }
        while let Some(c) = queue.pop_front() {
            if self.is_terminal(c) {
                continue; // terminal cells absorb
            }
            for a in Action::ALL {
                let (dx, dy) = a.delta();
                let (tx, ty) = (c.x as isize + dx, c.y as isize + dy);
                if tx < 0 || ty < 0 || tx as usize >= self.width || ty as usize >= self.height {
                    continue;
                }
                let t = Cell::new(tx as usize, ty as usize);
                if !self.is_wall(t) && seen.insert(t) {
                    queue.push_back(t);
                }
            }
        }
        seen
    }
}

/// Per-maze reward parameters used by [`make_maze_with`].
#[derive(Debug, Clone, Copy)]
pub struct MazeParams {
    pub step_reward: f64,
    pub gamma: f64,
    pub goal_reward: f64,
}

impl Default for MazeParams {
    fn default() -> Self {
        Self { step_reward: -1.0, gamma: 0.95, goal_reward: 0.0 }
    }
}

/// Parse a maze layout with default rewards (step −1, γ 0.95, goal 0).
///
/// Layout characters: `#` wall, `.` free, `S` start (exactly one), `G` goal
/// (at least one), digits `1`–`9` free cells belonging to the numbered
/// obstacle region. Rows are listed top to bottom and must share one width.
/// Every goal must be reachable from the start.
pub fn make_maze(text: &str) -> Result<GridMdp, EnvError> {
    make_maze_with(text, MazeParams::default())
}

/// [`make_maze`] with explicit reward parameters.
pub fn make_maze_with(text: &str, params: MazeParams) -> Result<GridMdp, EnvError> {
    let lines: Vec<&str> = text
        .lines()
        .map(|l| l.trim_end_matches(['\r']))
        .filter(|l| !l.trim().is_empty())
        .collect();
    if lines.is_empty() {
        return Err(EnvError::ParseError { row: 0, col: 0, msg: "empty layout".into() });
    }
    let height = lines.len();
    let width = lines[0].chars().count();
    let mut builder = GridMdpBuilder::new(width, height)
        .step_reward(params.step_reward)
        .gamma(params.gamma);
    let mut start: Option<Cell> = None;
    let mut regions: BTreeMap<u8, BTreeSet<Cell>> = BTreeMap::new();
    let mut goal_count = 0usize;
    for (row, line) in lines.iter().enumerate() {
        let chars: Vec<char> = line.chars().collect();
        if chars.len() != width {
            return Err(EnvError::ParseError {
                row,
                col: chars.len().min(width),
                msg: format!("row width {} differs from {}", chars.len(), width),
            });
        }
        let y = height - 1 - row;
        for (col, ch) in chars.iter().enumerate() {
            let cell = Cell::new(col, y);
            match ch {
                '#' => builder = builder.wall(cell),
                '.' => {}
                'S' => {
                    if start.is_some() {
                        return Err(EnvError::ParseError {
                            row,
                            col,
                            msg: "duplicate start marker".into(),
                        });
                    }
                    start = Some(cell);
                }
                'G' => {
                    builder = builder.goal(cell, params.goal_reward);
                    goal_count += 1;
                }
                '1'..='9' => {
                    let label = *ch as u8 - b'0';
                    regions.entry(label).or_default().insert(cell);
                }
                other => {
                    return Err(EnvError::ParseError {
                        row,
                        col,
                        msg: format!("unknown layout character {other:?}"),
                    });
                }
            }
        }
    }
    let start = start.ok_or(EnvError::ParseError {
        row: 0,
        col: 0,
        msg: "no start marker".into(),
    })?;
    if goal_count == 0 {
        return Err(EnvError::ParseError { row: 0, col: 0, msg: "no goal marker".into() });
    }
    for (label, region) in regions {
        builder = builder.labeled_region(label, region);
    }
    let mdp = builder.start(start).build()?;
    let reachable = mdp.reachable();
    for goal in mdp.goals.keys() {
        if !reachable.contains(goal) {
            return Err(EnvError::UnreachableGoal(*goal));
        }
    }
    Ok(mdp)
}

/// Return a copy of `mdp` with `obstacle` appended. The region must consist
/// of in-grid free, non-goal cells.
pub fn poison_env(mdp: &GridMdp, obstacle: ObstacleSpec) -> Result<GridMdp, EnvError> {
    if obstacle.region.is_empty() {
        return Err(EnvError::InvalidRegion("empty obstacle region".into()));
    }
    for c in &obstacle.region {
        if c.x >= mdp.width || c.y >= mdp.height {
            return Err(EnvError::InvalidRegion(format!(
                "cell ({},{}) outside grid",
                c.x, c.y
            )));
        }
        if mdp.is_wall(*c) {
            return Err(EnvError::InvalidRegion(format!(
                "cell ({},{}) is a wall",
                c.x, c.y
            )));
        }
        if mdp.is_terminal(*c) {
            return Err(EnvError::InvalidRegion(format!(
                "cell ({},{}) is a goal",
                c.x, c.y
            )));
        }
    }
    let mut out = mdp.clone();
    out.obstacles.push(obstacle);
    Ok(out)
}

// ---------------------------------------------------------------------------
// state encoding

/// Ordered anchor points: one encoded vector per free cell. Policies keep a
/// shared handle to the anchors of the MDP they were built for.
#[derive(Debug, PartialEq)]
pub struct Anchors {
    dim: usize,
    cells: Vec<Cell>,
    points: Vec<Vec<f64>>,
}

impl Anchors {
    pub fn new(dim: usize, cells: Vec<Cell>, points: Vec<Vec<f64>>) -> Self {
        assert_eq!(cells.len(), points.len());
        for p in &points {
            assert_eq!(p.len(), dim);
        }
        Self { dim, cells, points }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, i: usize) -> Cell {
        self.cells[i]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn index_of(&self, cell: Cell) -> Option<usize> {
        self.cells.iter().position(|c| *c == cell)
    }

    /// Index of the anchor nearest to `v` (ties: lowest index).
    pub fn nearest(&self, v: &[f64]) -> usize {
        assert_eq!(v.len(), self.dim);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d: f64 = p.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Injective map from free cells to `dim`-vectors.
///
/// Cell `(x, y)` encodes as `(x/width, y/height)` followed by `dim − 2`
/// zeros, then the whole map is shifted so the optimal-policy occupancy mean
/// sits at the origin. The trailing zero dimensions are exactly preserved —
/// they form the playground for trigger perturbations.
#[derive(Debug, Clone)]
pub struct StateEncoding {
    anchors: Arc<Anchors>,
    mean_offset: Vec<f64>,
    delta_sep: f64,
}

impl StateEncoding {
    /// Build an encoding for `mdp`, centering by the exact discounted
    /// occupancy of the value-iteration greedy policy.
    pub fn for_mdp(mdp: &GridMdp, dim: usize) -> Result<Self, EnvError> {
        if dim < 2 {
            return Err(EnvError::Invalid(format!(
                "encoding dimension {dim} too small: positions need 2"
            )));
        }
        let cells = mdp.free_cells();
        if cells.is_empty() {
            return Err(EnvError::Invalid("no free cells to encode".into()));
        }
        let raw: Vec<Vec<f64>> = cells
            .iter()
            .map(|c| {
                let mut v = vec![0.0; dim];
                v[0] = c.x as f64 / mdp.width as f64;
                v[1] = c.y as f64 / mdp.height as f64;
                v
            })
            .collect();
        // Occupancy weights of the greedy optimal policy.
        let plan = value_iteration(mdp, crate::tol::VALUE_ITERATION_DEFAULT);
        let occ = exact_occupancy(mdp, |c| {
            let mut row = [0.0; Action::COUNT];
            row[plan.greedy_action(c).index()] = 1.0;
            row
        });
        let mut mean_offset = vec![0.0; dim];
        for (i, c) in cells.iter().enumerate() {
            let w = occ.probability(*c);
            for (m, r) in mean_offset.iter_mut().zip(&raw[i]) {
                *m += w * r;
            }
        }
        let points: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| r.iter().zip(&mean_offset).map(|(a, b)| a - b).collect())
            .collect();
        let mut delta_sep = f64::INFINITY;
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let d: f64 = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                delta_sep = delta_sep.min(d);
            }
        }
        if points.len() == 1 {
            delta_sep = 1.0; // degenerate single-cell grid: any positive gap
        }
        if delta_sep <= 0.0 {
            return Err(EnvError::Invalid("encoding is not injective".into()));
        }
        Ok(Self {
            anchors: Arc::new(Anchors::new(dim, cells, points)),
            mean_offset,
            delta_sep,
        })
    }

    pub fn dim(&self) -> usize {
        self.anchors.dim
    }

    /// Minimum pairwise distance between encoded cells.
    pub fn delta_sep(&self) -> f64 {
        self.delta_sep
    }

    pub fn mean_offset(&self) -> &[f64] {
        &self.mean_offset
    }

    pub fn anchors(&self) -> Arc<Anchors> {
        Arc::clone(&self.anchors)
    }

    /// Encoded vector for a free cell. Panics on walls (they have no code).
    pub fn encode(&self, cell: Cell) -> &[f64] {
        let i = self
            .anchors
            .index_of(cell)
            .unwrap_or_else(|| panic!("cell ({},{}) has no encoding", cell.x, cell.y));
        self.anchors.point(i)
    }

    /// Nearest-cell decode.
    pub fn decode(&self, v: &[f64]) -> Cell {
        self.anchors.cell(self.anchors.nearest(v))
    }
}

// ---------------------------------------------------------------------------
// exact planning

/// Value-iteration output: optimal values and the greedy policy with ties
/// broken in the fixed action order up, down, left, right.
#[derive(Debug, Clone)]
pub struct ValueSolution {
    cells: Vec<Cell>,
    pos: BTreeMap<Cell, usize>,
    values: Vec<f64>,
    greedy: Vec<Action>,
}

impl ValueSolution {
    pub fn value(&self, cell: Cell) -> f64 {
        self.values[self.pos[&cell]]
    }

    pub fn greedy_action(&self, cell: Cell) -> Action {
        self.greedy[self.pos[&cell]]
    }

    /// All actions whose Q-value at `cell` ties the best one, up to a
    /// tolerance that sits far above value-iteration float noise and far
    /// below any genuine action gap on desk-scale grids. Geometric ties
    /// (several shortest routes) are real on open grids, and callers that
    /// want population-like behavior should spread mass over the whole set
    /// rather than privilege the scan order.
    pub fn greedy_actions(&self, mdp: &GridMdp, cell: Cell) -> Vec<Action> {
        if mdp.is_terminal(cell) {
            return vec![self.greedy_action(cell)];
        }
        let q: Vec<f64> = Action::ALL
            .iter()
            .map(|a| {
                let t = mdp.transition(cell, *a);
                t.reward + mdp.gamma() * self.value(t.next)
            })
            .collect();
        let best = q.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
        let tol = 1e-6 * (1.0 + best.abs());
        Action::ALL
            .iter()
            .zip(&q)
            .filter(|(_, qa)| **qa >= best - tol)
            .map(|(a, _)| *a)
            .collect()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Expected value under the start distribution.
    pub fn start_value(&self, mdp: &GridMdp) -> f64 {
        mdp.start_distribution()
            .iter()
            .map(|(c, p)| p * self.value(*c))
            .sum()
    }

    /// Greedy rollout from the start cell; stops at terminal or `max_steps`.
    pub fn greedy_path(&self, mdp: &GridMdp, max_steps: usize) -> Vec<Cell> {
        let mut cell = mdp.start_distribution()[0].0;
        let mut path = vec![cell];
        for _ in 0..max_steps {
            if mdp.is_terminal(cell) {
                break;
            }
            cell = mdp.transition(cell, self.greedy_action(cell)).next;
            path.push(cell);
        }
        path
    }
}

/// Synchronous value iteration to max-norm Bellman residual ≤ `tol`.
/// Terminal cells are pinned to their goal reward.
pub fn value_iteration(mdp: &GridMdp, tol: f64) -> ValueSolution {
    let cells = mdp.free_cells();
    let pos: BTreeMap<Cell, usize> = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let n = cells.len();
    let mut values = vec![0.0; n];
    for (i, c) in cells.iter().enumerate() {
        if mdp.is_terminal(*c) {
            values[i] = mdp.goal_reward(*c);
        }
    }
    let max_sweeps = 2_000_000usize;
    for sweep in 0..max_sweeps {
        let mut next = values.clone();
        let mut residual = 0.0f64;
        for (i, c) in cells.iter().enumerate() {
            if mdp.is_terminal(*c) {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for a in Action::ALL {
                let t = mdp.transition(*c, a);
                let v_next = values[pos[&t.next]];
                let q = t.reward + mdp.gamma() * v_next;
                if q > best {
                    best = q;
                }
            }
            residual = residual.max((best - values[i]).abs());
            next[i] = best;
        }
        values = next;
        if residual <= tol {
            break;
        }
        assert!(sweep + 1 < max_sweeps, "value iteration failed to converge");
    }
    let greedy: Vec<Action> = cells
        .iter()
        .map(|c| {
            if mdp.is_terminal(*c) {
                return Action::Up; // unused placeholder on terminals
            }
            let mut best_a = Action::Up;
            let mut best = f64::NEG_INFINITY;
            for a in Action::ALL {
                let t = mdp.transition(*c, a);
                let q = t.reward + mdp.gamma() * values[pos[&t.next]];
                if q > best {
                    best = q;
                    best_a = a;
                }
            }
            best_a
        })
        .collect();
    ValueSolution { cells, pos, values, greedy }
}

/// Discounted state-occupancy distribution.
#[derive(Debug, Clone)]
pub struct Occupancy {
    cells: Vec<Cell>,
    pos: BTreeMap<Cell, usize>,
    dist: Vec<f64>,
}

impl Occupancy {
    pub fn probability(&self, cell: Cell) -> f64 {
        self.pos.get(&cell).map(|i| self.dist[*i]).unwrap_or(0.0)
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.dist
    }

    /// Total-variation distance against another occupancy on the same MDP.
    pub fn tv_distance(&self, other: &Occupancy) -> f64 {
        assert_eq!(self.cells, other.cells);
        0.5 * self
            .dist
            .iter()
            .zip(&other.dist)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    pub(crate) fn from_counts(cells: Vec<Cell>, counts: Vec<f64>) -> Self {
        let total: f64 = counts.iter().sum();
        let pos = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let dist = counts.iter().map(|c| c / total).collect();
        Self { cells, pos, dist }
    }
}

/// Exact discounted occupancy `d(s) = (1-γ) Σ_t γ^t Pr(s_t = s)` of the
/// policy given by `pi` (a per-cell action distribution). Terminal cells act
/// as absorbing self-loops, so the entries account for all mass and sum to 1.
pub fn exact_occupancy<F>(mdp: &GridMdp, pi: F) -> Occupancy
where
    F: Fn(Cell) -> [f64; Action::COUNT],
{
    let cells = mdp.free_cells();
    let pos: BTreeMap<Cell, usize> = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let n = cells.len();
    let gamma = mdp.gamma();
    // transition matrix rows: p[s][s'] = Pr(s -> s')
    let mut p = vec![vec![0.0; n]; n];
    for (i, c) in cells.iter().enumerate() {
        if mdp.is_terminal(*c) {
            p[i][i] = 1.0;
            continue;
        }
        let row = pi(*c);
        let sum: f64 = row.iter().sum();
        debug_assert!((sum - 1.0).abs() < 1e-9, "policy row sums to {sum}");
        for a in Action::ALL {
            let w = row[a.index()];
            if w == 0.0 {
                continue;
            }
            let t = mdp.transition(*c, a);
            p[i][pos[&t.next]] += w;
        }
    }
    // solve (I - γ Pᵀ) d = (1-γ) μ
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = if i == j { 1.0 } else { 0.0 } - gamma * p[j][i];
        }
    }
    let mut b = vec![0.0; n];
    for (c, m) in mdp.start_distribution() {
        b[pos[c]] += (1.0 - gamma) * m;
    }
    let dist = crate::linalg::solve_dense(a, b)
        .expect("occupancy system is diagonally dominant for gamma < 1");
    Occupancy { cells, pos, dist }
}

/// Monte-Carlo occupancy estimate by geometric-horizon sampling: each
/// trajectory continues with probability γ and emits the state where it
/// stopped (terminal cells absorb). Used as the sampling counterpart of
/// [`exact_occupancy`].
pub fn sampled_occupancy(mdp: &GridMdp, pi: impl Fn(Cell) -> [f64; 4], n: usize, seed_master: u64) -> Occupancy {
    let cells = mdp.free_cells();
    let pos: BTreeMap<Cell, usize> = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut counts = vec![0.0f64; cells.len()];
    let mut rng = seed::stream(seed_master, "occupancy-sample", 0);
    for _ in 0..n {
        let mut cell = mdp.draw_start(&mut rng);
        loop {
            if mdp.is_terminal(cell) {
                break; // absorbed: every later state equals this one
            }
            if rng.gen::<f64>() >= mdp.gamma() {
                break;
            }
            let row = pi(cell);
            let mut u: f64 = rng.gen();
            let mut chosen = Action::Right;
            for a in Action::ALL {
                let w = row[a.index()];
                if u < w {
                    chosen = a;
                    break;
                }
                u -= w;
            }
            cell = mdp.transition(cell, chosen).next;
        }
        counts[pos[&cell]] += 1.0;
    }
    Occupancy::from_counts(cells, counts)
}
