//! Occupancy grids, roadmap connectivity, and the ASCII map format.
//!
//! Maps use the common benchmark layout:
//!
//! ```text
//! type octile
//! height 3
//! width 4
//! map
//! ....
//! .@@.
//! ....
//! ```
//!
//! `.` is a free cell and `@` a static obstacle. Cells are addressed by
//! `(row, col)`; in continuous coordinates a cell's center sits at
//! `x = col`, `y = row` and its square spans half a unit in each direction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: i32,
    pub col: i32,
}

impl Cell {
    pub const fn new(row: i32, col: i32) -> Self {
        Self { row, col }
    }

    pub fn offset(self, dr: i32, dc: i32) -> Self {
        Self::new(self.row + dr, self.col + dc)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// Which single-step moves form roadmap edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    /// Step offsets `(dr, dc)` in a fixed order.
    pub fn steps(self) -> &'static [(i32, i32)] {
        const FOUR: [(i32, i32); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
        const EIGHT: [(i32, i32); 8] = [
            (-1, 0),
            (-1, 1),
            (0, 1),
            (1, 1),
            (1, 0),
            (1, -1),
            (0, -1),
            (-1, -1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

impl FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "4" | "four" => Ok(Connectivity::Four),
            "8" | "eight" => Ok(Connectivity::Eight),
            other => Err(format!("unknown connectivity `{other}` (expected 4 or 8)")),
        }
    }
}

/// Distance used for edge lengths and the search heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Manhattan,
}

impl Metric {
    pub fn distance(self, a: Cell, b: Cell) -> f64 {
        let dr = f64::from(a.row - b.row);
        let dc = f64::from(a.col - b.col);
        match self {
            Metric::Euclidean => dr.hypot(dc),
            Metric::Manhattan => dr.abs() + dc.abs(),
        }
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "manhattan" => Ok(Metric::Manhattan),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// Connectivity plus metric: everything needed to turn a grid into a roadmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Roadmap {
    pub connectivity: Connectivity,
    pub metric: Metric,
}

/// A roadmap edge between two adjacent free cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: Cell,
    pub to: Cell,
    pub length: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("line {line}: {message}")]
    Header { line: usize, message: String },
    #[error("line {line}, column {column}: unknown glyph `{glyph}`")]
    Glyph {
        line: usize,
        column: usize,
        glyph: char,
    },
    #[error("line {line}: row has {found} cells, expected {expected}")]
    Ragged {
        line: usize,
        found: usize,
        expected: usize,
    },
    #[error("expected {expected} map rows, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("map dimensions must be positive (height {height}, width {width})")]
    ZeroDimension { height: usize, width: usize },
    #[error("cell {0} is outside the map")]
    OutOfBounds(Cell),
    #[error("cell {0} is an obstacle")]
    Blocked(Cell),
}

/// Immutable occupancy grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    height: usize,
    width: usize,
    blocked: Vec<bool>,
}

impl GridMap {
    /// An obstacle-free map.
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            blocked: vec![false; height * width],
        }
    }

    pub fn from_obstacles(
        height: usize,
        width: usize,
        obstacles: impl IntoIterator<Item = Cell>,
    ) -> Result<Self, MapError> {
        if height == 0 || width == 0 {
            return Err(MapError::ZeroDimension { height, width });
        }
        let mut map = Self::empty(height, width);
        for cell in obstacles {
            let idx = map.index(cell).ok_or(MapError::OutOfBounds(cell))?;
            map.blocked[idx] = true;
        }
        Ok(map)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.blocked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocked.is_empty()
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.row >= 0
            && cell.col >= 0
            && (cell.row as usize) < self.height
            && (cell.col as usize) < self.width
    }

    /// Row-major index of an in-bounds cell.
    pub fn index(&self, cell: Cell) -> Option<usize> {
        self.in_bounds(cell)
            .then(|| cell.row as usize * self.width + cell.col as usize)
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new((index / self.width) as i32, (index % self.width) as i32)
    }

    /// True for static obstacles and for anything off the map.
    pub fn is_blocked(&self, cell: Cell) -> bool {
        self.index(cell).is_none_or(|i| self.blocked[i])
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        !self.is_blocked(cell)
    }

    pub fn obstacles(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.len())
            .filter(|&i| self.blocked[i])
            .map(|i| self.cell_at(i))
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.len())
            .filter(|&i| !self.blocked[i])
            .map(|i| self.cell_at(i))
    }

    pub fn obstacle_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    /// Length of the map diagonal in cells.
    pub fn diagonal(&self) -> f64 {
        (self.height as f64).hypot(self.width as f64)
    }

    /// Free neighbours of a free cell with their edge lengths.
    pub fn neighbors(&self, cell: Cell, roadmap: Roadmap) -> Result<Vec<Edge>, MapError> {
        if !self.in_bounds(cell) {
            return Err(MapError::OutOfBounds(cell));
        }
        if self.is_blocked(cell) {
            return Err(MapError::Blocked(cell));
        }
        Ok(roadmap
            .connectivity
            .steps()
            .iter()
            .map(|&(dr, dc)| cell.offset(dr, dc))
            .filter(|&n| self.is_free(n))
            .map(|to| Edge {
                from: cell,
                to,
                length: roadmap.metric.distance(cell, to),
            })
            .collect())
    }

    /// Parses the ASCII map format.
    pub fn parse(text: &str) -> Result<Self, MapError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let mut height = None;
        let mut width = None;
        let mut saw_type = false;
        loop {
            let (line, content) = lines.next().ok_or(MapError::Header {
                line: 0,
                message: "missing `map` line".into(),
            })?;
            let mut parts = content.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let value = parts.next();
            match (key, value) {
                ("type", Some(_)) => saw_type = true,
                ("height", Some(v)) => height = Some(parse_dimension(v, line)?),
                ("width", Some(v)) => width = Some(parse_dimension(v, line)?),
                ("map", None) => break,
                _ => {
                    return Err(MapError::Header {
                        line,
                        message: format!("unexpected header line `{content}`"),
                    })
                }
            }
        }
        if !saw_type {
            return Err(MapError::Header {
                line: 1,
                message: "missing `type` line".into(),
            });
        }
        let (height, width) = match (height, width) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(MapError::Header {
                    line: 1,
                    message: "missing `height` or `width`".into(),
                })
            }
        };
        if height == 0 || width == 0 {
            return Err(MapError::ZeroDimension { height, width });
        }

        let mut blocked = Vec::with_capacity(height * width);
        let mut rows = 0;
        for (line, content) in lines {
            let found = content.chars().count();
            if found != width {
                return Err(MapError::Ragged {
                    line,
                    found,
                    expected: width,
                });
            }
            for (column, glyph) in content.chars().enumerate() {
                blocked.push(match glyph {
                    '.' => false,
                    '@' => true,
                    glyph => {
                        return Err(MapError::Glyph {
                            line,
                            column: column + 1,
                            glyph,
                        })
                    }
                });
            }
            rows += 1;
        }
        if rows != height {
            return Err(MapError::RowCount {
                expected: height,
                found: rows,
            });
        }
        Ok(Self {
            height,
            width,
            blocked,
        })
    }
}

fn parse_dimension(value: &str, line: usize) -> Result<usize, MapError> {
    value.parse().map_err(|_| MapError::Header {
        line,
        message: format!("invalid dimension `{value}`"),
    })
}

impl fmt::Display for GridMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "type octile")?;
        writeln!(f, "height {}", self.height)?;
        writeln!(f, "width {}", self.width)?;
        writeln!(f, "map")?;
        for row in self.blocked.chunks(self.width) {
            let line: String = row.iter().map(|&b| if b { '@' } else { '.' }).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl FromStr for GridMap {
    type Err = MapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}
