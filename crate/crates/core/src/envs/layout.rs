//! Grid layouts and the plain-text grid grammar.
//!
//! Grammar (one grid per file):
//!
//! ```text
//! file    := line*
//! line    := comment | blank | row
//! comment := ';' any*            (ignored)
//! blank   := whitespace*         (ignored)
//! row     := cell+               (all rows must have equal length)
//! cell    := '#'                 (wall)
//!          | '.'                 (free, unlabeled)
//!          | [A-Za-z0-9]         (free, labeled; labels must be unique)
//! ```
//!
//! Row 0 is the top of the grid; "up" decreases the row index.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }

    /// Goal-space image of the cell: its `(x, y)` coordinates.
    pub fn coords(self) -> [f64; 2] {
        [self.x as f64, self.y as f64]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutId {
    ExampleMdp,
    Gridworld5,
    Umaze,
    Medium,
    Large,
    /// Loaded from a grid file.
    Custom,
}

impl LayoutId {
    pub const BUILTIN: [LayoutId; 5] = [
        LayoutId::ExampleMdp,
        LayoutId::Gridworld5,
        LayoutId::Umaze,
        LayoutId::Medium,
        LayoutId::Large,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutId::ExampleMdp => "example_mdp",
            LayoutId::Gridworld5 => "gridworld5",
            LayoutId::Umaze => "umaze",
            LayoutId::Medium => "medium",
            LayoutId::Large => "large",
            LayoutId::Custom => "custom",
        }
    }

    pub fn default_horizon(self) -> usize {
        match self {
            LayoutId::ExampleMdp | LayoutId::Umaze => 50,
            LayoutId::Gridworld5 | LayoutId::Medium | LayoutId::Custom => 100,
            LayoutId::Large => 200,
        }
    }

    pub fn action_set(self) -> ActionSet {
        match self {
            LayoutId::ExampleMdp => ActionSet::UpRight,
            _ => ActionSet::Compass,
        }
    }

    /// Built-in grid text; `None` for custom layouts.
    pub fn grid_text(self) -> Option<&'static str> {
        match self {
            LayoutId::ExampleMdp => Some(EXAMPLE_MDP),
            LayoutId::Gridworld5 => Some(GRIDWORLD5),
            LayoutId::Umaze => Some(UMAZE),
            LayoutId::Medium => Some(MEDIUM),
            LayoutId::Large => Some(LARGE),
            LayoutId::Custom => None,
        }
    }
}

impl fmt::Display for LayoutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example_mdp" => Ok(LayoutId::ExampleMdp),
            "gridworld5" => Ok(LayoutId::Gridworld5),
            "umaze" => Ok(LayoutId::Umaze),
            "medium" => Ok(LayoutId::Medium),
            "large" => Ok(LayoutId::Large),
            "custom" => Ok(LayoutId::Custom),
            other => Err(Error::Config(format!("unknown layout {other:?}"))),
        }
    }
}

/// Five states plus the goal, two actions. `0`-`4` are s0-s4, `G` is g.
const EXAMPLE_MDP: &str = "\
#####
##G##
#123#
##04#
#####
";

const GRIDWORLD5: &str = "\
#######
#.....#
#.....#
#.....#
#.....#
#.....#
#######
";

const UMAZE: &str = "\
#####
#...#
###.#
#...#
#####
";

const MEDIUM: &str = "\
########
#..##..#
#..#...#
##...###
#..#...#
#.#..#.#
#...#..#
########
";

const LARGE: &str = "\
############
#....#.....#
#.##.#.#.#.#
#......#...#
#.####.###.#
#..#.#.....#
##.#.#.#.###
#..#...#...#
############
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSet {
    /// Up, right.
    UpRight,
    /// Up, right, down, left.
    Compass,
}

impl ActionSet {
    pub fn len(self) -> usize {
        match self {
            ActionSet::UpRight => 2,
            ActionSet::Compass => 4,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// `(dx, dy)` of an action index.
    pub fn delta(self, action: usize) -> Option<(isize, isize)> {
        const MOVES: [(isize, isize); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
        (action < self.len()).then(|| MOVES[action])
    }

    pub fn name(self, action: usize) -> &'static str {
        ["up", "right", "down", "left"].get(action).copied().unwrap_or("?")
    }
}

pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;

/// A validated grid: bordered, with at least two mutually reachable free cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub layout: LayoutId,
    pub width: usize,
    pub height: usize,
    walls: Vec<bool>,
    labels: Vec<(char, Cell)>,
    pub actions: ActionSet,
    free: Vec<Cell>,
}

impl MazeSpec {
    pub fn builtin(layout: LayoutId) -> Result<Self> {
        let text = layout
            .grid_text()
            .ok_or_else(|| Error::Config("custom layouts must be loaded from a file".into()))?;
        Self::parse(layout, text, layout.action_set())
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse(LayoutId::Custom, &text, ActionSet::Compass).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn parse(layout: LayoutId, text: &str, actions: ActionSet) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty() && !l.starts_with(';'))
            .collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if height < 3 || width < 3 {
            return Err(Error::invalid("grid must be at least 3x3"));
        }
        let mut walls = Vec::with_capacity(width * height);
        let mut labels: Vec<(char, Cell)> = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::invalid(format!("row {y} has a different width")));
            }
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    c if c.is_ascii_alphanumeric() => {
                        if labels.iter().any(|(l, _)| *l == c) {
                            return Err(Error::invalid(format!("label {c:?} used twice")));
                        }
                        labels.push((c, Cell::new(x, y)));
                        walls.push(false);
                    }
                    c => return Err(Error::invalid(format!("unexpected character {c:?}"))),
                }
            }
        }
        let spec_walls = |x: usize, y: usize| walls[y * width + x];
        for x in 0..width {
            if !spec_walls(x, 0) || !spec_walls(x, height - 1) {
                return Err(Error::invalid("outer border must be wall"));
            }
        }
        for y in 0..height {
            if !spec_walls(0, y) || !spec_walls(width - 1, y) {
                return Err(Error::invalid("outer border must be wall"));
            }
        }
        let free: Vec<Cell> = (0..height)
            .flat_map(|y| (0..width).map(move |x| Cell::new(x, y)))
            .filter(|c| !walls[c.y * width + c.x])
            .collect();
        if free.len() < 2 {
            return Err(Error::invalid("grid needs at least two free cells"));
        }
        let spec = MazeSpec {
            layout,
            width,
            height,
            walls,
            labels,
            actions,
            free,
        };
        let reached = spec.flood_fill(spec.free[0]).len();
        if reached != spec.free.len() {
            return Err(Error::invalid(format!(
                "only {reached} of {} free cells are connected",
                spec.free.len()
            )));
        }
        Ok(spec)
    }

    pub fn is_wall(&self, x: usize, y: usize) -> bool {
        x >= self.width || y >= self.height || self.walls[y * self.width + x]
    }

    pub fn is_free(&self, c: Cell) -> bool {
        !self.is_wall(c.x, c.y)
    }

    pub fn free_cells(&self) -> &[Cell] {
        &self.free
    }

    pub fn num_states(&self) -> usize {
        self.free.len()
    }

    /// Row-major index of a free cell.
    pub fn state_index(&self, c: Cell) -> Option<usize> {
        self.free.binary_search_by(|p| (p.y, p.x).cmp(&(c.y, c.x))).ok()
    }

    pub fn label(&self, c: char) -> Option<Cell> {
        self.labels.iter().find(|(l, _)| *l == c).map(|(_, cell)| *cell)
    }

    pub fn label_of(&self, cell: Cell) -> Option<char> {
        self.labels.iter().find(|(_, c)| *c == cell).map(|(l, _)| *l)
    }

    /// Deterministic successor; blocked moves keep the cell.
    pub fn successor(&self, c: Cell, action: usize) -> Cell {
        let Some((dx, dy)) = self.actions.delta(action) else {
            return c;
        };
        let nx = c.x as isize + dx;
        let ny = c.y as isize + dy;
        if nx < 0 || ny < 0 || self.is_wall(nx as usize, ny as usize) {
            c
        } else {
            Cell::new(nx as usize, ny as usize)
        }
    }

    /// Free cells 4-connected to `start`.
    pub fn flood_fill(&self, start: Cell) -> Vec<Cell> {
        let mut seen = vec![false; self.width * self.height];
        let mut out = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start.y * self.width + start.x] = true;
        while let Some(c) = queue.pop_front() {
            out.push(c);
            for (dx, dy) in [(0isize, -1isize), (1, 0), (0, 1), (-1, 0)] {
                let nx = c.x as isize + dx;
                let ny = c.y as isize + dy;
                if nx < 0 || ny < 0 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !self.is_wall(nx, ny) && !seen[ny * self.width + nx] {
                    seen[ny * self.width + nx] = true;
                    queue.push_back(Cell::new(nx, ny));
                }
            }
        }
        out
    }

    /// Shortest-path distance (in moves under this action set) from every
    /// free cell to `goal`; `usize::MAX` where unreachable.
    pub fn distances_to(&self, goal: Cell) -> Vec<usize> {
        let n = self.free.len();
        let mut dist = vec![usize::MAX; n];
        let Some(gi) = self.state_index(goal) else {
            return dist;
        };
        // Reverse BFS over the deterministic successor relation.
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, &c) in self.free.iter().enumerate() {
            for a in 0..self.actions.len() {
                let j = self.state_index(self.successor(c, a)).unwrap();
                if j != i {
                    preds[j].push(i);
                }
            }
        }
        dist[gi] = 0;
        let mut queue = VecDeque::from([gi]);
        while let Some(j) = queue.pop_front() {
            for &i in &preds[j] {
                if dist[i] == usize::MAX {
                    dist[i] = dist[j] + 1;
                    queue.push_back(i);
                }
            }
        }
        dist
    }

    pub fn render(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                let ch = if self.is_wall(x, y) {
                    '#'
                } else {
                    self.labels.iter().find(|(_, lc)| *lc == c).map_or('.', |(l, _)| *l)
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }
}
