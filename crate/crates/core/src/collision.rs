//! Convex agent footprints, covered-cell rasterization and safety-distance
//! collision checks.
//!
//! A [`PolygonModel`] is given in cell units relative to its anchor, which is
//! placed on the center of the agent's current cell. Two placed footprints
//! collide when their outlines come closer than the safety distance `d`, or
//! when their interiors overlap. A cell is covered by a footprint when the
//! cell's square and the polygon share positive area.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ConvexPolygon, Point, TOUCH_EPS};
use crate::grid::{Cell, Connectivity, GridMap};

#[derive(Debug, Error, PartialEq)]
pub enum FootprintError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon is not strictly convex at vertex {0}")]
    NotConvex(usize),
    #[error("footprint at {cell} leaves the map: rows {min_row}..={max_row}, cols {min_col}..={max_col}")]
    OutOfBounds {
        cell: Cell,
        min_row: i32,
        max_row: i32,
        min_col: i32,
        max_col: i32,
    },
    #[error("line {line}: {message}")]
    Library { line: usize, message: String },
    #[error("unknown footprint `{0}`")]
    Unknown(String),
}

/// A strictly convex agent outline, counter-clockwise, relative to its anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct PolygonModel {
    vertices: Vec<Point>,
}

impl PolygonModel {
    /// Validates convexity. Clockwise input is reversed to counter-clockwise.
    pub fn new(mut vertices: Vec<Point>) -> Result<Self, FootprintError> {
        let n = vertices.len();
        if n < 3 {
            return Err(FootprintError::TooFewVertices(n));
        }
        let turn = |v: &[Point], i: usize| {
            let a = v[i];
            let b = v[(i + 1) % n];
            let c = v[(i + 2) % n];
            b.sub(a).cross(c.sub(b))
        };
        let first = turn(&vertices, 0);
        if first.abs() <= TOUCH_EPS {
            return Err(FootprintError::NotConvex(1));
        }
        for i in 1..n {
            let t = turn(&vertices, i);
            if t.abs() <= TOUCH_EPS || t.signum() != first.signum() {
                return Err(FootprintError::NotConvex((i + 1) % n));
            }
        }
        // Consistent turning alone admits star polygons; a simple convex
        // outline winds exactly once.
        let total: f64 = (0..n)
            .map(|i| {
                let a = vertices[(i + 1) % n].sub(vertices[i]);
                let b = vertices[(i + 2) % n].sub(vertices[(i + 1) % n]);
                a.cross(b).atan2(a.dot(b))
            })
            .sum();
        if (total.abs() - std::f64::consts::TAU).abs() > 1e-6 {
            return Err(FootprintError::NotConvex(0));
        }
        if first < 0.0 {
            vertices.reverse();
        }
        Ok(Self { vertices })
    }

    /// Axis-aligned `w × h` rectangle centered on the anchor.
    pub fn rectangle(w: f64, h: f64) -> Self {
        let (hw, hh) = (w / 2.0, h / 2.0);
        Self {
            vertices: vec![
                Point::new(-hw, -hh),
                Point::new(hw, -hh),
                Point::new(hw, hh),
                Point::new(-hw, hh),
            ],
        }
    }

    /// The unit cell square: covers exactly the anchor cell.
    pub fn unit_square() -> Self {
        Self::rectangle(1.0, 1.0)
    }

    /// The 7×7 aircraft outline used by the airport scenarios; covers 23 cells.
    pub fn aircraft() -> Self {
        Self::new(vec![
            Point::new(-2.6, -2.6),
            Point::new(0.0, -2.3),
            Point::new(2.6, 2.6),
            Point::new(-2.3, 0.0),
        ])
        .expect("aircraft outline is convex")
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    /// The outline with its anchor at continuous position `(x, y)`.
    pub fn at(&self, x: f64, y: f64) -> ConvexPolygon {
        ConvexPolygon::from_ccw(self.vertices.iter().map(|v| Point::new(v.x + x, v.y + y)).collect())
    }

    pub fn at_cell(&self, cell: Cell) -> ConvexPolygon {
        self.at(f64::from(cell.col), f64::from(cell.row))
    }

    /// Covered cell offsets relative to the anchor cell. Translation by whole
    /// cells preserves coverage, so this is computed once per model.
    pub fn covered_offsets(&self) -> Vec<(i32, i32)> {
        cells_near(&self.at(0.0, 0.0), 0.0)
    }
}

impl TryFrom<Vec<Point>> for PolygonModel {
    type Error = FootprintError;

    fn try_from(v: Vec<Point>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<PolygonModel> for Vec<Point> {
    fn from(m: PolygonModel) -> Self {
        m.vertices
    }
}

/// Offsets `(dr, dc)` of cells whose square overlaps `poly`'s interior or lies
/// closer than `d` to it.
fn cells_near(poly: &ConvexPolygon, d: f64) -> Vec<(i32, i32)> {
    let (min_x, min_y, max_x, max_y) = poly.bounds();
    let pad = d + 1.0;
    let c0 = (min_x - pad).floor() as i32;
    let c1 = (max_x + pad).ceil() as i32;
    let r0 = (min_y - pad).floor() as i32;
    let r1 = (max_y + pad).ceil() as i32;
    let mut out = Vec::new();
    for r in r0..=r1 {
        for c in c0..=c1 {
            let square = ConvexPolygon::cell_square(r, c);
            if square.interiors_overlap(poly) || (d > 0.0 && square.distance(poly) < d) {
                out.push((r, c));
            }
        }
    }
    out
}

/// A model placed on a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement<'a> {
    pub model: &'a PolygonModel,
    pub cell: Cell,
}

impl<'a> Placement<'a> {
    pub fn new(model: &'a PolygonModel, cell: Cell) -> Self {
        Self { model, cell }
    }

    pub fn outline(&self) -> ConvexPolygon {
        self.model.at_cell(self.cell)
    }
}

/// The base footprint grown by the safety distance `d` (rounded corners).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionModel {
    pub base: PolygonModel,
    pub safety_distance: f64,
}

impl DetectionModel {
    pub fn new(base: PolygonModel, safety_distance: f64) -> Self {
        Self {
            base,
            safety_distance,
        }
    }

    /// Distance from a point (anchor-relative) to the base polygon.
    fn base_distance(&self, p: Point) -> f64 {
        let poly = self.base.at(0.0, 0.0);
        if poly.contains_point(p) {
            0.0
        } else {
            poly.edges()
                .map(|e| crate::geometry::point_segment_distance(p, e))
                .fold(f64::INFINITY, f64::min)
        }
    }

    /// Closed membership in the expanded region.
    pub fn contains(&self, p: Point) -> bool {
        self.base_distance(p) <= self.safety_distance
    }

    /// Distance from a point inside the expanded region to its boundary.
    pub fn depth(&self, p: Point) -> f64 {
        self.safety_distance - self.base_distance(p)
    }

    /// Cell offsets the detection model touches (square closer than `d`, or overlapping).
    pub fn covered_offsets(&self) -> Vec<(i32, i32)> {
        cells_near(&self.base.at(0.0, 0.0), self.safety_distance)
    }
}

/// Cells covered by `model` placed on `cell`; errors if any lie off the map.
pub fn covered_cells(
    model: &PolygonModel,
    cell: Cell,
    map: &GridMap,
) -> Result<BTreeSet<Cell>, FootprintError> {
    let cells: BTreeSet<Cell> = model
        .covered_offsets()
        .into_iter()
        .map(|(dr, dc)| cell.offset(dr, dc))
        .collect();
    if cells.iter().all(|&c| map.in_bounds(c)) {
        Ok(cells)
    } else {
        let min_row = cells.iter().map(|c| c.row).min().unwrap_or(cell.row);
        let max_row = cells.iter().map(|c| c.row).max().unwrap_or(cell.row);
        let min_col = cells.iter().map(|c| c.col).min().unwrap_or(cell.col);
        let max_col = cells.iter().map(|c| c.col).max().unwrap_or(cell.col);
        Err(FootprintError::OutOfBounds {
            cell,
            min_row,
            max_row,
            min_col,
            max_col,
        })
    }
}

/// Outline collision between two convex polygons at safety distance `d`.
pub fn polygons_collide(a: &ConvexPolygon, b: &ConvexPolygon, d: f64) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    let gap_x = (bx0 - ax1).max(ax0 - bx1).max(0.0);
    let gap_y = (by0 - ay1).max(ay0 - by1).max(0.0);
    // Box gap is a lower bound on the polygon distance.
    if gap_x.hypot(gap_y) >= d.max(TOUCH_EPS) {
        return false;
    }
    a.interiors_overlap(b) || (d > 0.0 && a.distance(b) < d)
}

/// True iff the two placed outlines are closer than `d` or overlap.
pub fn check_collision(p: &Placement<'_>, q: &Placement<'_>, d: f64) -> bool {
    polygons_collide(&p.outline(), &q.outline(), d)
}

/// True iff the `d`-expanded footprint touches a static obstacle or the map edge.
pub fn check_static_collision(p: &Placement<'_>, map: &GridMap, d: f64) -> bool {
    DetectionModel::new(p.model.clone(), d)
        .covered_offsets()
        .into_iter()
        .any(|(dr, dc)| map.is_blocked(p.cell.offset(dr, dc)))
}

/// Precomputed cell offsets for a model at a fixed safety distance and
/// connectivity. Every planner and environment query goes through this.
#[derive(Debug, Clone)]
pub struct FootprintStamp {
    model: PolygonModel,
    safety_distance: f64,
    covered: Vec<(i32, i32)>,
    expanded: Vec<(i32, i32)>,
    /// Per step of the connectivity: cells swept by the base footprint while
    /// moving one step, relative to the destination cell.
    swept: Vec<((i32, i32), Vec<(i32, i32)>)>,
}

impl FootprintStamp {
    pub fn new(model: PolygonModel, safety_distance: f64, connectivity: Connectivity) -> Self {
        let covered = model.covered_offsets();
        let expanded = DetectionModel::new(model.clone(), safety_distance).covered_offsets();
        let swept = connectivity
            .steps()
            .iter()
            .map(|&(dr, dc)| {
                let start = model.at(-f64::from(dc), -f64::from(dr));
                let end = model.at(0.0, 0.0);
                let mut pts = start.vertices().to_vec();
                pts.extend_from_slice(end.vertices());
                let hull = ConvexPolygon::hull(&pts).expect("swept hull is non-degenerate");
                ((dr, dc), cells_near(&hull, 0.0))
            })
            .collect();
        Self {
            model,
            safety_distance,
            covered,
            expanded,
            swept,
        }
    }

    pub fn model(&self) -> &PolygonModel {
        &self.model
    }

    pub fn safety_distance(&self) -> f64 {
        self.safety_distance
    }

    pub fn covered(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        self.covered.iter().map(move |&(dr, dc)| cell.offset(dr, dc))
    }

    pub fn expanded(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        self.expanded.iter().map(move |&(dr, dc)| cell.offset(dr, dc))
    }

    pub fn expanded_offsets(&self) -> &[(i32, i32)] {
        &self.expanded
    }

    /// Cells swept moving from `from` to the adjacent `to`, excluding the
    /// expanded destination region. `None` if the cells are not one step apart.
    pub fn swept(&self, from: Cell, to: Cell) -> Option<impl Iterator<Item = Cell> + '_> {
        let step = (to.row - from.row, to.col - from.col);
        self.swept
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, cells)| cells.iter().map(move |&(dr, dc)| to.offset(dr, dc)))
    }

    /// Every offset (relative to a move's destination) whose obstacle status can
    /// change the cost of moving into that destination.
    pub fn influence_offsets(&self) -> BTreeSet<(i32, i32)> {
        let mut all: BTreeSet<(i32, i32)> = self.expanded.iter().copied().collect();
        for (_, cells) in &self.swept {
            all.extend(cells.iter().copied());
        }
        all
    }

    pub fn static_collision(&self, cell: Cell, map: &GridMap) -> bool {
        self.expanded(cell).any(|c| map.is_blocked(c))
    }
}

/// Named footprints loaded from a library file:
///
/// ```text
/// # name followed by `x,y; x,y; ...` in cell units
/// unit -0.5,-0.5; 0.5,-0.5; 0.5,0.5; -0.5,0.5
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FootprintLibrary {
    models: BTreeMap<String, PolygonModel>,
}

impl FootprintLibrary {
    /// The library every scenario can rely on: `unit`, `square3`, `aircraft`.
    pub fn builtin() -> Self {
        let mut lib = Self::default();
        lib.insert("unit", PolygonModel::unit_square());
        lib.insert("square3", PolygonModel::rectangle(3.0, 3.0));
        lib.insert("aircraft", PolygonModel::aircraft());
        lib
    }

    pub fn insert(&mut self, name: impl Into<String>, model: PolygonModel) {
        self.models.insert(name.into(), model);
    }

    pub fn get(&self, name: &str) -> Result<&PolygonModel, FootprintError> {
        self.models
            .get(name)
            .ok_or_else(|| FootprintError::Unknown(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    /// Parses a library file and layers it over the builtin footprints.
    pub fn parse(text: &str) -> Result<Self, FootprintError> {
        let mut lib = Self::builtin();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (name, rest) = content.split_once(char::is_whitespace).ok_or_else(|| {
                FootprintError::Library {
                    line,
                    message: "expected `name x,y; x,y; ...`".into(),
                }
            })?;
            let vertices = rest
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|pair| {
                    let (x, y) = pair.split_once(',').ok_or_else(|| FootprintError::Library {
                        line,
                        message: format!("bad vertex `{pair}`"),
                    })?;
                    let parse = |v: &str| {
                        v.trim().parse::<f64>().map_err(|_| FootprintError::Library {
                            line,
                            message: format!("bad coordinate `{v}`"),
                        })
                    };
                    Ok(Point::new(parse(x)?, parse(y)?))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let model = PolygonModel::new(vertices).map_err(|e| FootprintError::Library {
                line,
                message: e.to_string(),
            })?;
            lib.insert(name, model);
        }
        Ok(lib)
    }
}

impl fmt::Display for FootprintLibrary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, model) in &self.models {
            let verts: Vec<String> = model
                .vertices()
                .iter()
                .map(|v| format!("{},{}", v.x, v.y))
                .collect();
            writeln!(f, "{name} {}", verts.join("; "))?;
        }
        Ok(())
    }
}
