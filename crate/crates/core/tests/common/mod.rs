//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's geometry: polygons are plain
//! `(x, y)` vertex lists, overlap is measured by Sutherland-Hodgman clipping,
//! and polygon distance goes through the Minkowski difference.

#![allow(dead_code)]

pub mod checks;

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use mappohr::geometry::Point;
use mappohr::grid::{Cell, GridMap};
use mappohr::PolygonModel;
use rand::Rng;

pub type Poly = Vec<(f64, f64)>;

/// Area below which clipped pieces count as touching only.
pub const AREA_EPS: f64 = 1e-9;

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

pub fn square(row: i32, col: i32) -> Poly {
    let (x, y) = (f64::from(col), f64::from(row));
    vec![
        (x - 0.5, y - 0.5),
        (x + 0.5, y - 0.5),
        (x + 0.5, y + 0.5),
        (x - 0.5, y + 0.5),
    ]
}

pub fn translate(p: &Poly, dx: f64, dy: f64) -> Poly {
    p.iter().map(|&(x, y)| (x + dx, y + dy)).collect()
}

pub fn area(p: &Poly) -> f64 {
    let n = p.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            a.0 * b.1 - a.1 * b.0
        })
        .sum();
    twice.abs() / 2.0
}

/// Convex hull, counter-clockwise (Andrew's monotone chain).
pub fn hull(points: &[(f64, f64)]) -> Poly {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut out: Poly = Vec::new();
    for pass in 0..2 {
        let start = out.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while out.len() >= start + 2 && cross(out[out.len() - 2], out[out.len() - 1], p) <= 0.0 {
                out.pop();
            }
            out.push(p);
        }
        out.pop();
    }
    out
}

/// Clips `subject` against the convex CCW polygon `clip`.
pub fn clip(subject: &Poly, clip: &Poly) -> Poly {
    let mut output = subject.clone();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut output);
        let inside = |p: (f64, f64)| cross(a, b, p) >= 0.0;
        let intersect = |p: (f64, f64), q: (f64, f64)| {
            let (cp, cq) = (cross(a, b, p), cross(a, b, q));
            let t = cp / (cp - cq);
            (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
        };
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(cur), inside(prev)) {
                (true, true) => output.push(cur),
                (true, false) => {
                    output.push(intersect(prev, cur));
                    output.push(cur);
                }
                (false, true) => output.push(intersect(prev, cur)),
                (false, false) => {}
            }
        }
    }
    output
}

pub fn overlap_area(a: &Poly, b: &Poly) -> f64 {
    area(&clip(a, b))
}

fn point_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Distance between two convex polygons: distance from the origin to the
/// Minkowski difference `a - b` (zero if it contains the origin).
pub fn minkowski_distance(a: &Poly, b: &Poly) -> f64 {
    let diff: Vec<(f64, f64)> = a
        .iter()
        .flat_map(|&p| b.iter().map(move |&q| (p.0 - q.0, p.1 - q.1)))
        .collect();
    let h = hull(&diff);
    let n = h.len();
    let origin = (0.0, 0.0);
    if (0..n).all(|i| cross(h[i], h[(i + 1) % n], origin) >= 0.0) {
        return 0.0;
    }
    (0..n)
        .map(|i| point_segment(origin, h[i], h[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

/// Cells whose square shares area with `p`, or lies closer than `d` to it.
pub fn rasterize(p: &Poly, d: f64) -> BTreeSet<(i32, i32)> {
    let pad = d + 2.0;
    let x0 = p.iter().map(|v| v.0).fold(f64::INFINITY, f64::min) - pad;
    let x1 = p.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max) + pad;
    let y0 = p.iter().map(|v| v.1).fold(f64::INFINITY, f64::min) - pad;
    let y1 = p.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max) + pad;
    let mut out = BTreeSet::new();
    for r in y0.floor() as i32..=y1.ceil() as i32 {
        for c in x0.floor() as i32..=x1.ceil() as i32 {
            let sq = square(r, c);
            if overlap_area(&sq, p) > AREA_EPS || (d > 0.0 && minkowski_distance(&sq, p) < d) {
                out.insert((r, c));
            }
        }
    }
    out
}

/// Random convex polygon inside `[-half, half]^2` that contains the origin.
pub fn random_convex(rng: &mut impl Rng, half: f64) -> Poly {
    loop {
        let k = rng.random_range(3..=7);
        let pts: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.random_range(-half..half), rng.random_range(-half..half)))
            .collect();
        let h = hull(&pts);
        let n = h.len();
        if n >= 3
            && area(&h) > 0.2
            && (0..n).all(|i| cross(h[i], h[(i + 1) % n], (0.0, 0.0)) > 1e-3)
        {
            return h;
        }
    }
}

pub fn to_model(p: &Poly) -> PolygonModel {
    PolygonModel::new(p.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
}

pub fn random_map(rng: &mut impl Rng, height: usize, width: usize, density: f64) -> GridMap {
    let obstacles: Vec<Cell> = (0..height as i32)
        .flat_map(|r| (0..width as i32).map(move |c| Cell::new(r, c)))
        .filter(|_| rng.random_bool(density))
        .collect();
    GridMap::from_obstacles(height, width, obstacles).unwrap()
}

/// Shortest path length by plain Dijkstra over placements, using only the
/// reference geometry above. `None` when the goal is unreachable.
pub struct DijkstraOracle<'a> {
    pub map: &'a GridMap,
    pub footprint: Poly,
    pub d: f64,
    pub steps: Vec<(i32, i32)>,
    pub euclidean: bool,
}

impl DijkstraOracle<'_> {
    fn blocked(&self, r: i32, c: i32) -> bool {
        self.map.is_blocked(Cell::new(r, c))
    }

    fn placed(&self, cell: Cell) -> Poly {
        translate(&self.footprint, f64::from(cell.col), f64::from(cell.row))
    }

    fn hits_obstacle(&self, p: &Poly, d: f64) -> bool {
        let pad = d + 2.0;
        let x0 = p.iter().map(|v| v.0).fold(f64::INFINITY, f64::min) - pad;
        let x1 = p.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max) + pad;
        let y0 = p.iter().map(|v| v.1).fold(f64::INFINITY, f64::min) - pad;
        let y1 = p.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max) + pad;
        for r in y0.floor() as i32..=y1.ceil() as i32 {
            for c in x0.floor() as i32..=x1.ceil() as i32 {
                if !self.blocked(r, c) {
                    continue;
                }
                let sq = square(r, c);
                if overlap_area(&sq, p) > AREA_EPS || (d > 0.0 && minkowski_distance(&sq, p) < d) {
                    return true;
                }
            }
        }
        false
    }

    pub fn placement_ok(&self, cell: Cell) -> bool {
        !self.blocked(cell.row, cell.col) && !self.hits_obstacle(&self.placed(cell), self.d)
    }

    fn edge_ok(&self, from: Cell, to: Cell) -> bool {
        if !self.placement_ok(to) {
            return false;
        }
        let mut pts = self.placed(from);
        pts.extend(self.placed(to));
        !self.hits_obstacle(&hull(&pts), 0.0)
    }

    pub fn shortest(&self, start: Cell, goal: Cell) -> Option<f64> {
        let (h, w) = (self.map.height(), self.map.width());
        let idx = |c: Cell| c.row as usize * w + c.col as usize;
        let mut dist = vec![f64::INFINITY; h * w];
        let mut heap = BinaryHeap::new();
        dist[idx(start)] = 0.0;
        heap.push(Reverse((Ordered(0.0), start.row, start.col)));
        let mut ok_cache: Vec<Option<bool>> = vec![None; h * w];
        while let Some(Reverse((Ordered(du), r, c))) = heap.pop() {
            let u = Cell::new(r, c);
            if u == goal {
                return Some(du);
            }
            if du > dist[idx(u)] {
                continue;
            }
            for &(dr, dc) in &self.steps {
                let v = u.offset(dr, dc);
                if !self.map.in_bounds(v) || self.blocked(v.row, v.col) {
                    continue;
                }
                let vi = idx(v);
                let placement = *ok_cache[vi].get_or_insert_with(|| self.placement_ok(v));
                if !placement || !self.edge_ok(u, v) {
                    continue;
                }
                let len = if self.euclidean {
                    f64::from(dr * dr + dc * dc).sqrt()
                } else {
                    f64::from(dr.abs() + dc.abs())
                };
                let nd = du + len;
                if nd < dist[vi] {
                    dist[vi] = nd;
                    heap.push(Reverse((Ordered(nd), v.row, v.col)));
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ordered(f64);

impl Eq for Ordered {}

impl PartialOrd for Ordered {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ordered {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

pub const FOUR: [(i32, i32); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
pub const EIGHT: [(i32, i32); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];
