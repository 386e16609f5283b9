//! A grid world with continuous observations and actions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// A grid cell; `y` grows downward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// Layout and reward structure of a grid world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridWorldSpec {
    pub width: usize,
    pub height: usize,
    /// Row-major, `true` where a wall blocks the cell.
    pub walls: Vec<bool>,
    pub start: Cell,
    pub goal: Cell,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub max_steps: usize,
    /// Start every episode in a uniformly drawn free cell other than the goal.
    pub random_start: bool,
    /// Actions whose largest component is below this magnitude stay put.
    pub dead_zone: f64,
}

impl GridWorldSpec {
    /// A wall-free grid from the top-left to the bottom-right corner.
    pub fn open(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            walls: vec![false; width * height],
            start: Cell::new(0, 0),
            goal: Cell::new(width.saturating_sub(1), height.saturating_sub(1)),
            step_reward: -0.05,
            goal_reward: 1.0,
            max_steps: 4 * (width + height),
            random_start: false,
            dead_zone: 0.3,
        }
    }

    /// Parses rows of `.` (free), `#` (wall), `S` (start) and `G` (goal),
    /// separated by newlines or `/`.
    pub fn from_layout(layout: &str) -> Result<Self> {
        let rows: Vec<&str> = layout
            .split(['\n', '/'])
            .map(str::trim)
            .filter(|r| !r.is_empty())
            .collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut spec = Self::open(width, height);
        let (mut start, mut goal) = (None, None);
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::Config(format!("layout row {y} is not {width} cells wide")));
            }
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '.' => {}
                    '#' => spec.walls[y * width + x] = true,
                    'S' => start = Some(Cell::new(x, y)),
                    'G' => goal = Some(Cell::new(x, y)),
                    other => return Err(Error::Config(format!("unknown layout character {other:?}"))),
                }
            }
        }
        spec.start = start.ok_or_else(|| Error::Config("layout has no start cell".into()))?;
        spec.goal = goal.ok_or_else(|| Error::Config("layout has no goal cell".into()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// The layout string accepted by [`GridWorldSpec::from_layout`].
    pub fn layout(&self) -> String {
        let mut rows = Vec::with_capacity(self.height);
        for y in 0..self.height {
            let row: String = (0..self.width)
                .map(|x| {
                    let c = Cell::new(x, y);
                    if c == self.start {
                        'S'
                    } else if c == self.goal {
                        'G'
                    } else if self.walls[y * self.width + x] {
                        '#'
                    } else {
                        '.'
                    }
                })
                .collect();
            rows.push(row);
        }
        rows.join("/")
    }

    /// A 7×7 maze with two wall runs between the corners.
    pub fn maze() -> Self {
        let mut spec = Self::from_layout(
            "S......\
             /.#####.\
             /.....#.\
             /####.#.\
             /......#\
             /.#####.\
             /......G",
        )
        .expect("built-in layout");
        spec.max_steps = 60;
        spec
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        self.walls[c.y * self.width + c.x]
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 && self.height < 2 {
            return Err(Error::Config("grid needs at least two cells".into()));
        }
        if self.walls.len() != self.width * self.height {
            return Err(Error::Config(format!(
                "{} wall flags for a {}x{} grid",
                self.walls.len(),
                self.width,
                self.height
            )));
        }
        for (name, c) in [("start", self.start), ("goal", self.goal)] {
            if c.x >= self.width || c.y >= self.height {
                return Err(Error::Config(format!("{name} {c:?} outside the grid")));
            }
            if self.is_wall(c) {
                return Err(Error::Config(format!("{name} {c:?} is a wall")));
            }
        }
        if self.start == self.goal {
            return Err(Error::Config("start and goal coincide".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dead_zone) {
            return Err(Error::Config(format!("dead zone {} outside [0, 1)", self.dead_zone)));
        }
        if !self.step_reward.is_finite() || !self.goal_reward.is_finite() {
            return Err(Error::Config("rewards must be finite".into()));
        }
        Ok(())
    }
}

/// The four moves, in the order used to break ties.
pub const MOVES: [(isize, isize); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// Result of one environment step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub next: Cell,
    pub reward: f64,
    pub done: bool,
}

/// A validated grid world with its distance-to-goal field.
#[derive(Clone, Debug)]
pub struct GridWorld {
    spec: GridWorldSpec,
    distance: Vec<Option<usize>>,
    free: Vec<Cell>,
}

impl GridWorld {
    /// Fails when the goal cannot be reached from the start, or from any
    /// free cell when starts are random.
    pub fn new(spec: GridWorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut world = Self {
            distance: Vec::new(),
            free: Vec::new(),
            spec,
        };
        world.distance = world.distances_to_goal();
        let spec = &world.spec;
        world.free = (0..spec.height)
            .flat_map(|y| (0..spec.width).map(move |x| Cell::new(x, y)))
            .filter(|&c| !spec.is_wall(c) && c != spec.goal)
            .collect();
        if world.distance(spec.start).is_none() {
            return Err(Error::Config("goal unreachable from the start".into()));
        }
        if spec.random_start {
            if let Some(c) = world.free.iter().find(|&&c| world.distance(c).is_none()) {
                return Err(Error::Config(format!("goal unreachable from free cell {c:?}")));
            }
        }
        Ok(world)
    }

    pub fn spec(&self) -> &GridWorldSpec {
        &self.spec
    }

    /// Free cells other than the goal.
    pub fn free_cells(&self) -> &[Cell] {
        &self.free
    }

    /// Shortest number of moves from `c` to the goal.
    pub fn distance(&self, c: Cell) -> Option<usize> {
        self.distance[c.y * self.spec.width + c.x]
    }

    fn distances_to_goal(&self) -> Vec<Option<usize>> {
        let s = &self.spec;
        let mut dist = vec![None; s.width * s.height];
        dist[s.goal.y * s.width + s.goal.x] = Some(0);
        let mut queue = VecDeque::from([s.goal]);
        while let Some(c) = queue.pop_front() {
            let d = dist[c.y * s.width + c.x].expect("queued cells have a distance");
            for m in MOVES {
                if let Some(n) = self.neighbor(c, m) {
                    let slot = &mut dist[n.y * s.width + n.x];
                    if slot.is_none() {
                        *slot = Some(d + 1);
                        queue.push_back(n);
                    }
                }
            }
        }
        dist
    }

    /// The free cell one move away, if any.
    pub fn neighbor(&self, c: Cell, (dx, dy): (isize, isize)) -> Option<Cell> {
        let x = c.x.checked_add_signed(dx)?;
        let y = c.y.checked_add_signed(dy)?;
        let n = Cell::new(x, y);
        (x < self.spec.width && y < self.spec.height && !self.spec.is_wall(n)).then_some(n)
    }

    /// Normalized coordinates in `[0, 1]²`.
    pub fn observe(&self, c: Cell) -> [f64; 2] {
        let scale = |v: usize, n: usize| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
        [scale(c.x, self.spec.width), scale(c.y, self.spec.height)]
    }

    /// The cell whose observation is nearest to `obs`.
    pub fn locate(&self, obs: &[f64]) -> Cell {
        let snap = |v: f64, n: usize| {
            let i = (v.clamp(0.0, 1.0) * (n.max(2) - 1) as f64).round() as usize;
            i.min(n - 1)
        };
        Cell::new(snap(obs[0], self.spec.width), snap(obs[1], self.spec.height))
    }

    /// The move an action requests: its dominant axis, or none inside the
    /// dead zone. Components are clipped to `[-1, 1]` first.
    pub fn decode_action(&self, action: &[f64]) -> Option<(isize, isize)> {
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        if ax.abs().max(ay.abs()) < self.spec.dead_zone || ax.is_nan() || ay.is_nan() {
            return None;
        }
        Some(if ax.abs() >= ay.abs() {
            (ax.signum() as isize, 0)
        } else {
            (0, ay.signum() as isize)
        })
    }

    /// Start cell of a new episode.
    pub fn reset(&self, rng: &mut SeededRng) -> Cell {
        if self.spec.random_start {
            self.free[rng.below(self.free.len())]
        } else {
            self.spec.start
        }
    }

    /// Blocked moves leave the agent in place.
    pub fn step(&self, c: Cell, action: &[f64]) -> Step {
        let next = self
            .decode_action(action)
            .and_then(|m| self.neighbor(c, m))
            .unwrap_or(c);
        let done = next == self.spec.goal;
        Step {
            next,
            reward: if done {
                self.spec.goal_reward
            } else {
                self.spec.step_reward
            },
            done,
        }
    }
}
