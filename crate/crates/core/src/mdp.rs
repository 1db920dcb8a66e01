//! Tabular MDPs, gridworld construction and dynamics perturbations.
//!
//! States of a gridworld are indexed row-major, `y * width + x`, with `y = 0`
//! being the bottom row. The action set is fixed to five actions; see
//! [`Action`].

use std::collections::BTreeSet;

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// A finite-horizon, discounted MDP with a dense transition tensor.
///
/// The sparse successor lists are derived once at construction and are what
/// the solvers iterate over.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    transition: Array3<f64>,
    initial_dist: Array1<f64>,
    discount: f64,
    horizon: usize,
    successors: Vec<Vec<(usize, f64)>>,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        initial_dist: Array1<f64>,
        discount: f64,
        horizon: usize,
    ) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("empty state or action set".into()));
        }
        if n_next != n_states {
            return Err(Error::InvalidMdp(format!(
                "transition tensor has shape ({n_states}, {n_actions}, {n_next})"
            )));
        }
        if initial_dist.len() != n_states {
            return Err(Error::InvalidMdp(format!(
                "initial distribution has {} entries, expected {n_states}",
                initial_dist.len()
            )));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidMdp(format!("discount {discount} not in (0, 1)")));
        }
        if horizon == 0 {
            return Err(Error::InvalidMdp("horizon must be at least 1".into()));
        }
        check_distribution(initial_dist.iter().copied(), "initial distribution")?;
        let mut successors = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = transition.slice(ndarray::s![s, a, ..]);
                check_distribution(row.iter().copied(), &format!("transition row ({s}, {a})"))?;
                successors.push(
                    row.iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0.0)
                        .map(|(next, &p)| (next, p))
                        .collect(),
                );
            }
        }
        Ok(Self {
            transition,
            initial_dist,
            discount,
            horizon,
            successors,
        })
    }

    pub fn n_states(&self) -> usize {
        self.transition.dim().0
    }

    pub fn n_actions(&self) -> usize {
        self.transition.dim().1
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn initial_dist(&self) -> &Array1<f64> {
        &self.initial_dist
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Nonzero entries of `p(. | s, a)` in increasing next-state order.
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.successors[s * self.n_actions() + a]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[[s, a, next]]
    }

    /// A state is absorbing when every action returns to it with probability one.
    pub fn is_absorbing(&self, s: usize) -> bool {
        (0..self.n_actions()).all(|a| {
            let succ = self.successors(s, a);
            succ.len() == 1 && succ[0].0 == s
        })
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.initial_dist.clone(),
            self.discount,
            horizon,
        )
    }

    pub fn with_initial_dist(&self, initial_dist: Array1<f64>) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            initial_dist,
            self.discount,
            self.horizon,
        )
    }
}

fn check_distribution(values: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for v in values {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidMdp(format!("{what} has entry {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidMdp(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// Grid cell `(x, y)`; serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell(pub usize, pub usize);

impl Cell {
    pub fn x(self) -> usize {
        self.0
    }

    pub fn y(self) -> usize {
        self.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
    ];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, 1),
            Action::Down => (0, -1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }
}

pub const GRID_ACTIONS: usize = 5;

fn default_discount() -> f64 {
    0.95
}

fn default_horizon() -> usize {
    60
}

fn default_grid_side() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldSpec {
    #[serde(default = "default_grid_side")]
    pub width: usize,
    #[serde(default = "default_grid_side")]
    pub height: usize,
    #[serde(default)]
    pub obstacles: BTreeSet<Cell>,
    pub start_cells: BTreeSet<Cell>,
    pub goal_cells: BTreeSet<Cell>,
    pub slip_prob: f64,
    pub goal_reward: f64,
    pub step_reward: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

impl Default for GridworldSpec {
    /// 16x16 grid from the bottom-left to the top-right corner.
    fn default() -> Self {
        Self {
            width: 16,
            height: 16,
            obstacles: BTreeSet::new(),
            start_cells: [Cell(0, 0)].into(),
            goal_cells: [Cell(15, 15)].into(),
            slip_prob: 0.1,
            goal_reward: 1.0,
            step_reward: -0.02,
            discount: default_discount(),
            horizon: default_horizon(),
        }
    }
}

impl GridworldSpec {
    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn state(&self, cell: Cell) -> usize {
        cell.y() * self.width + cell.x()
    }

    pub fn cell(&self, state: usize) -> Cell {
        Cell(state % self.width, state / self.width)
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.x() < self.width && cell.y() < self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidSpec("grid must be at least 1x1".into()));
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return Err(Error::InvalidSpec(format!(
                "slip_prob {} not in [0, 1)",
                self.slip_prob
            )));
        }
        if self.start_cells.is_empty() {
            return Err(Error::InvalidSpec("no start cells".into()));
        }
        if !self.goal_reward.is_finite() || !self.step_reward.is_finite() {
            return Err(Error::InvalidSpec("rewards must be finite".into()));
        }
        let sets = [
            ("obstacle", &self.obstacles),
            ("start", &self.start_cells),
            ("goal", &self.goal_cells),
        ];
        for (name, set) in sets {
            if let Some(c) = set.iter().find(|c| !self.contains(**c)) {
                return Err(Error::InvalidSpec(format!(
                    "{name} cell ({}, {}) outside {}x{} grid",
                    c.x(),
                    c.y(),
                    self.width,
                    self.height
                )));
            }
        }
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                if let Some(c) = sets[i].1.intersection(sets[j].1).next() {
                    return Err(Error::InvalidSpec(format!(
                        "cell ({}, {}) is both {} and {}",
                        c.x(),
                        c.y(),
                        sets[i].0,
                        sets[j].0
                    )));
                }
            }
        }
        Ok(())
    }

    /// Target of a single move; off-grid and obstacle targets stay in place.
    fn step(&self, cell: Cell, action: Action) -> Cell {
        let (dx, dy) = action.delta();
        let x = cell.x() as isize + dx;
        let y = cell.y() as isize + dy;
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            return cell;
        }
        let next = Cell(x as usize, y as usize);
        if self.obstacles.contains(&next) {
            cell
        } else {
            next
        }
    }
}

/// A gridworld MDP together with the spec it was built from and its
/// ground-truth state reward.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    pub spec: GridworldSpec,
    pub mdp: TabularMdp,
    pub truth: Vec<f64>,
}

pub fn build_gridworld(spec: &GridworldSpec) -> Result<GridWorld> {
    spec.validate()?;
    let n = spec.n_states();
    let mut transition = Array3::<f64>::zeros((n, GRID_ACTIONS, n));
    for s in 0..n {
        let cell = spec.cell(s);
        if spec.goal_cells.contains(&cell) || spec.obstacles.contains(&cell) {
            for a in 0..GRID_ACTIONS {
                transition[[s, a, s]] = 1.0;
            }
            continue;
        }
        for action in Action::ALL {
            let a = action.index();
            let intended = spec.state(spec.step(cell, action));
            transition[[s, a, intended]] += 1.0 - spec.slip_prob;
            if spec.slip_prob > 0.0 {
                for slip in Action::MOVES {
                    let target = spec.state(spec.step(cell, slip));
                    transition[[s, a, target]] += spec.slip_prob / 4.0;
                }
            }
        }
    }
    let mut initial = Array1::<f64>::zeros(n);
    let mass = 1.0 / spec.start_cells.len() as f64;
    for c in &spec.start_cells {
        initial[spec.state(*c)] = mass;
    }
    let truth = (0..n)
        .map(|s| {
            if spec.goal_cells.contains(&spec.cell(s)) {
                spec.goal_reward
            } else {
                spec.step_reward
            }
        })
        .collect();
    let mdp = TabularMdp::new(transition, initial, spec.discount, spec.horizon)?;
    Ok(GridWorld {
        spec: spec.clone(),
        mdp,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Perturbation {
    AddObstacles { cells: Vec<Cell> },
    ChangeSlip { slip_prob: f64 },
    ShiftInitial { initial_dist: Vec<f64> },
}

impl Perturbation {
    pub fn identity() -> Self {
        Perturbation::AddObstacles { cells: Vec::new() }
    }

    /// Short human-readable label used in result tables.
    pub fn label(&self) -> String {
        match self {
            Perturbation::AddObstacles { cells } if cells.is_empty() => "none".to_string(),
            Perturbation::AddObstacles { cells } => format!("obstacles-{}", cells.len()),
            Perturbation::ChangeSlip { slip_prob } => format!("slip-{slip_prob}"),
            Perturbation::ShiftInitial { .. } => "shift-initial".to_string(),
        }
    }
}

/// Applies `p` to `world`, returning a new world. The input is not modified.
///
/// New obstacles are written directly into the transition tensor: probability
/// mass that used to enter an obstacle cell stays in the source state, and the
/// obstacle itself becomes a self-loop.
pub fn apply_perturbation(world: &GridWorld, p: &Perturbation) -> Result<GridWorld> {
    let spec = &world.spec;
    match p {
        Perturbation::AddObstacles { cells } => {
            let mut next_spec = spec.clone();
            let mut transition = world.mdp.transition().clone();
            let n = spec.n_states();
            let n_actions = world.mdp.n_actions();
            for &c in cells {
                if !spec.contains(c) {
                    return Err(Error::InvalidPerturbation(format!(
                        "obstacle ({}, {}) outside the grid",
                        c.x(),
                        c.y()
                    )));
                }
                if spec.goal_cells.contains(&c) {
                    return Err(Error::InvalidPerturbation(format!(
                        "obstacle ({}, {}) placed on a goal cell",
                        c.x(),
                        c.y()
                    )));
                }
                let blocked = spec.state(c);
                if world.mdp.initial_dist()[blocked] > 0.0 {
                    return Err(Error::InvalidPerturbation(format!(
                        "obstacle ({}, {}) placed on a start cell",
                        c.x(),
                        c.y()
                    )));
                }
                if !next_spec.obstacles.insert(c) {
                    continue;
                }
                for s in 0..n {
                    for a in 0..n_actions {
                        if s == blocked {
                            continue;
                        }
                        let mass = transition[[s, a, blocked]];
                        if mass > 0.0 {
                            transition[[s, a, blocked]] = 0.0;
                            transition[[s, a, s]] += mass;
                        }
                    }
                }
                for a in 0..n_actions {
                    for next in 0..n {
                        transition[[blocked, a, next]] = if next == blocked { 1.0 } else { 0.0 };
                    }
                }
            }
            let mdp = TabularMdp::new(
                transition,
                world.mdp.initial_dist().clone(),
                world.mdp.discount(),
                world.mdp.horizon(),
            )
            .map_err(|e| Error::InvalidPerturbation(e.to_string()))?;
            Ok(GridWorld {
                spec: next_spec,
                mdp,
                truth: world.truth.clone(),
            })
        }
        Perturbation::ChangeSlip { slip_prob } => {
            let mut next_spec = spec.clone();
            next_spec.slip_prob = *slip_prob;
            let rebuilt = build_gridworld(&next_spec)
                .map_err(|e| Error::InvalidPerturbation(e.to_string()))?;
            let mdp = rebuilt
                .mdp
                .with_initial_dist(world.mdp.initial_dist().clone())?;
            Ok(GridWorld {
                spec: next_spec,
                mdp,
                truth: world.truth.clone(),
            })
        }
        Perturbation::ShiftInitial { initial_dist } => {
            if initial_dist.len() != spec.n_states() {
                return Err(Error::InvalidPerturbation(format!(
                    "initial distribution has {} entries, expected {}",
                    initial_dist.len(),
                    spec.n_states()
                )));
            }
            if let Some(c) = spec
                .obstacles
                .iter()
                .find(|c| initial_dist[spec.state(**c)] > 0.0)
            {
                return Err(Error::InvalidPerturbation(format!(
                    "initial mass on obstacle ({}, {})",
                    c.x(),
                    c.y()
                )));
            }
            let mdp = world
                .mdp
                .with_initial_dist(Array1::from_vec(initial_dist.clone()))
                .map_err(|e| Error::InvalidPerturbation(e.to_string()))?;
            Ok(GridWorld {
                spec: spec.clone(),
                mdp,
                truth: world.truth.clone(),
            })
        }
    }
}

/// Manhattan distance from `cell` to the nearest goal cell.
pub fn goal_distance(spec: &GridworldSpec, cell: Cell) -> usize {
    spec.goal_cells
        .iter()
        .map(|g| g.x().abs_diff(cell.x()) + g.y().abs_diff(cell.y()))
        .min()
        .unwrap_or(0)
}
