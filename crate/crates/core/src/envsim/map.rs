use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A grid cell, `x` to the right and `y` downward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Closed occupancy grid. Border cells are always walls.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMap {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    /// Optional markers from the text format.
    pub start: Option<Cell>,
    pub goal: Option<Cell>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("room8", include_str!("../../maps/room8.txt")),
    ("corridor", include_str!("../../maps/corridor.txt")),
    ("two-room", include_str!("../../maps/two-room.txt")),
    ("maze", include_str!("../../maps/maze.txt")),
];

impl GridMap {
    /// Build from a row-major wall mask, checking the closed-world rules.
    pub fn from_walls(width: usize, height: usize, walls: Vec<bool>) -> Result<Self> {
        if walls.len() != width * height || width < 3 || height < 3 {
            return Err(Error::Config(format!(
                "a {width}x{height} map needs at least 3x3 cells and {} entries",
                width * height
            )));
        }
        let map = GridMap {
            width,
            height,
            walls,
            start: None,
            goal: None,
        };
        for y in 0..height {
            for x in 0..width {
                let border = x == 0 || y == 0 || x + 1 == width || y + 1 == height;
                if border && !map.walls[y * width + x] {
                    return Err(Error::Config(format!("border cell ({x}, {y}) is not a wall")));
                }
            }
        }
        if !map.walls.iter().any(|w| !w) {
            return Err(Error::Config("map has no free cell".into()));
        }
        Ok(map)
    }

    /// Parse the text format: `#` wall, `.` free, `S` start, `G` goal.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let Some(&(_, first)) = rows.first() else {
            return Err(Error::MapParse {
                line: 1,
                msg: "empty map".into(),
            });
        };
        let width = first.chars().count();
        let mut walls = Vec::with_capacity(width * rows.len());
        let (mut start, mut goal) = (None, None);
        for (y, &(line, row)) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::MapParse {
                    line,
                    msg: format!("row has {} cells, expected {width}", row.chars().count()),
                });
            }
            for (x, ch) in row.chars().enumerate() {
                let marker = |slot: &mut Option<Cell>, name: &str| {
                    if slot.replace(Cell::new(x, y)).is_some() {
                        return Err(Error::MapParse {
                            line,
                            msg: format!("second {name} marker"),
                        });
                    }
                    Ok(())
                };
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' => {
                        marker(&mut start, "start")?;
                        walls.push(false);
                    }
                    'G' => {
                        marker(&mut goal, "goal")?;
                        walls.push(false);
                    }
                    other => {
                        return Err(Error::MapParse {
                            line,
                            msg: format!("unexpected character {other:?} at column {}", x + 1),
                        })
                    }
                }
            }
        }
        let height = rows.len();
        let mut map = GridMap::from_walls(width, height, walls).map_err(|e| Error::MapParse {
            line: rows[0].0,
            msg: e.to_string(),
        })?;
        map.start = start;
        map.goal = goal;
        Ok(map)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                out.push(if self.is_wall(c) {
                    '#'
                } else if Some(c) == self.start {
                    'S'
                } else if Some(c) == self.goal {
                    'G'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("no bundled map named {name}")))?;
        Self::parse(text)
    }

    /// A bundled map name, or else a path to a map file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if BUNDLED.iter().any(|(n, _)| *n == name_or_path) {
            return Self::bundled(name_or_path);
        }
        Self::parse(&std::fs::read_to_string(Path::new(name_or_path))?)
    }

    /// Open room: walls only on the border.
    pub fn empty_room(width: usize, height: usize) -> Result<Self> {
        let walls = (0..width * height)
            .map(|i| {
                let (x, y) = (i % width, i / width);
                x == 0 || y == 0 || x + 1 == width || y + 1 == height
            })
            .collect();
        Self::from_walls(width, height, walls)
    }

    /// Border walls plus independent interior walls with probability
    /// `wall_prob`. Interior cells may end up disconnected.
    pub fn random(width: usize, height: usize, wall_prob: f64, rng: &mut impl Rng) -> Result<Self> {
        loop {
            let walls: Vec<bool> = (0..width * height)
                .map(|i| {
                    let (x, y) = (i % width, i / width);
                    let border = x == 0 || y == 0 || x + 1 == width || y + 1 == height;
                    border || rng.gen_bool(wall_prob)
                })
                .collect();
            if walls.iter().any(|w| !w) {
                return Self::from_walls(width, height, walls);
            }
        }
    }

    /// Like [`GridMap::random`], then every free cell outside the largest
    /// connected region is turned into a wall.
    pub fn random_connected(width: usize, height: usize, wall_prob: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut map = Self::random(width, height, wall_prob, rng)?;
        let mut label = vec![usize::MAX; width * height];
        let mut best = (0, 0);
        let mut next = 0;
        for c in map.free_cells() {
            let i = map.index(c);
            if label[i] != usize::MAX {
                continue;
            }
            let mut stack = vec![c];
            label[i] = next;
            let mut size = 0;
            while let Some(cur) = stack.pop() {
                size += 1;
                for n in map.free_neighbors(cur) {
                    let j = map.index(n);
                    if label[j] == usize::MAX {
                        label[j] = next;
                        stack.push(n);
                    }
                }
            }
            if size > best.1 {
                best = (next, size);
            }
            next += 1;
        }
        for (i, w) in map.walls.iter_mut().enumerate() {
            if label[i] != best.0 {
                *w = true;
            }
        }
        Ok(map)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    pub fn cell(&self, index: usize) -> Cell {
        Cell::new(index % self.width, index / self.width)
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Out-of-bounds counts as wall.
    pub fn is_wall(&self, c: Cell) -> bool {
        c.x >= self.width || c.y >= self.height || self.walls[self.index(c)]
    }

    pub fn is_wall_at(&self, x: i64, y: i64) -> bool {
        !self.in_bounds(x, y) || self.walls[y as usize * self.width + x as usize]
    }

    pub fn is_free(&self, c: Cell) -> bool {
        !self.is_wall(c)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.walls.len())
            .filter(|&i| !self.walls[i])
            .map(|i| self.cell(i))
            .collect()
    }

    /// Free 4-neighbours in the order N, E, S, W.
    pub fn free_neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        [(0i64, -1i64), (1, 0), (0, 1), (-1, 0)]
            .into_iter()
            .filter_map(move |(dx, dy)| {
                let (x, y) = (c.x as i64 + dx, c.y as i64 + dy);
                (!self.is_wall_at(x, y)).then(|| Cell::new(x as usize, y as usize))
            })
    }

    /// Rotate a quarter turn clockwise (as drawn, with `y` downward); the
    /// cell `(x, y)` moves to `(height - 1 - y, x)`.
    pub fn rotate_cw(&self) -> Self {
        let (w, h) = (self.height, self.width);
        let mut walls = vec![false; w * h];
        for y in 0..self.height {
            for x in 0..self.width {
                let c = self.rotate_cell_cw(Cell::new(x, y));
                walls[c.y * w + c.x] = self.walls[y * self.width + x];
            }
        }
        GridMap {
            width: w,
            height: h,
            walls,
            start: self.start.map(|c| self.rotate_cell_cw(c)),
            goal: self.goal.map(|c| self.rotate_cell_cw(c)),
        }
    }

    pub fn rotate_cell_cw(&self, c: Cell) -> Cell {
        Cell::new(self.height - 1 - c.y, c.x)
    }

    /// Mirror left to right; `(x, y)` moves to `(width - 1 - x, y)`.
    pub fn mirror_x(&self) -> Self {
        let mut walls = vec![false; self.walls.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                walls[y * self.width + (self.width - 1 - x)] = self.walls[y * self.width + x];
            }
        }
        GridMap {
            width: self.width,
            height: self.height,
            walls,
            start: self.start.map(|c| self.mirror_cell_x(c)),
            goal: self.goal.map(|c| self.mirror_cell_x(c)),
        }
    }

    pub fn mirror_cell_x(&self, c: Cell) -> Cell {
        Cell::new(self.width - 1 - c.x, c.y)
    }
}
