//! Planar primitives: points, segments, and convex polygons.
//!
//! `x` runs along grid columns and `y` along grid rows.

use serde::{Deserialize, Serialize};

/// Slack used when deciding that two closed sets merely touch.
pub const TOUCH_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Point) -> f64 {
        self.sub(o).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

impl Segment {
    pub const fn new(a: Point, b: Point) -> Self {
        Self { a, b }
    }
}

/// Distance from `p` to the closed segment `s`; zero-length segments act as points.
pub fn point_segment_distance(p: Point, s: Segment) -> f64 {
    let ab = s.b.sub(s.a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.distance(s.a);
    }
    let t = (p.sub(s.a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(s.a.add(ab.scale(t)))
}

fn orientation(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

fn on_segment(p: Point, s: Segment) -> bool {
    p.x >= s.a.x.min(s.b.x)
        && p.x <= s.a.x.max(s.b.x)
        && p.y >= s.a.y.min(s.b.y)
        && p.y <= s.a.y.max(s.b.y)
}

/// Closed-segment intersection test, collinear overlaps included.
pub fn segments_intersect(s: Segment, t: Segment) -> bool {
    let d1 = orientation(t.a, t.b, s.a);
    let d2 = orientation(t.a, t.b, s.b);
    let d3 = orientation(s.a, s.b, t.a);
    let d4 = orientation(s.a, s.b, t.b);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(s.a, t))
        || (d2 == 0.0 && on_segment(s.b, t))
        || (d3 == 0.0 && on_segment(t.a, s))
        || (d4 == 0.0 && on_segment(t.b, s))
}

/// Exact Euclidean distance between two closed segments (0 when they meet).
pub fn min_segment_distance(s: Segment, t: Segment) -> f64 {
    if segments_intersect(s, t) {
        return 0.0;
    }
    point_segment_distance(s.a, t)
        .min(point_segment_distance(s.b, t))
        .min(point_segment_distance(t.a, s))
        .min(point_segment_distance(t.b, s))
}

/// A convex polygon in absolute coordinates, vertices counter-clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    /// Wraps vertices that are already known to be convex and counter-clockwise.
    pub fn from_ccw(vertices: Vec<Point>) -> Self {
        debug_assert!(vertices.len() >= 3);
        Self { vertices }
    }

    /// Convex hull of an arbitrary point set (monotone chain). `None` if degenerate.
    pub fn hull(points: &[Point]) -> Option<Self> {
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        pts.dedup();
        if pts.len() < 3 {
            return None;
        }
        let mut lower: Vec<Point> = Vec::new();
        for &p in &pts {
            while lower.len() >= 2
                && orientation(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0
            {
                lower.pop();
            }
            lower.push(p);
        }
        let mut upper: Vec<Point> = Vec::new();
        for &p in pts.iter().rev() {
            while upper.len() >= 2
                && orientation(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0
            {
                upper.pop();
            }
            upper.push(p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        (lower.len() >= 3).then(|| Self::from_ccw(lower))
    }

    /// Axis-aligned unit square of a grid cell.
    pub fn cell_square(row: i32, col: i32) -> Self {
        let (x, y) = (f64::from(col), f64::from(row));
        Self::from_ccw(vec![
            Point::new(x - 0.5, y - 0.5),
            Point::new(x + 0.5, y - 0.5),
            Point::new(x + 0.5, y + 0.5),
            Point::new(x - 0.5, y + 0.5),
        ])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = Segment> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| Segment::new(self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn translated(&self, by: Point) -> Self {
        Self::from_ccw(self.vertices.iter().map(|v| v.add(by)).collect())
    }

    pub fn area(&self) -> f64 {
        0.5 * self
            .edges()
            .map(|e| e.a.cross(e.b))
            .sum::<f64>()
    }

    /// `(min_x, min_y, max_x, max_y)`
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), v| (a.min(v.x), b.min(v.y), c.max(v.x), d.max(v.y)),
        )
    }

    /// Closed containment test.
    pub fn contains_point(&self, p: Point) -> bool {
        self.edges()
            .all(|e| orientation(e.a, e.b, p) >= -TOUCH_EPS)
    }

    /// Minimum distance between the two outlines.
    pub fn outline_distance(&self, other: &ConvexPolygon) -> f64 {
        let mut best = f64::INFINITY;
        for e in self.edges() {
            for f in other.edges() {
                best = best.min(min_segment_distance(e, f));
                if best == 0.0 {
                    return 0.0;
                }
            }
        }
        best
    }

    /// True when the polygon interiors share positive area. Touching boundaries
    /// do not count (separating-axis test with touch slack).
    pub fn interiors_overlap(&self, other: &ConvexPolygon) -> bool {
        !(self.has_separating_edge(other) || other.has_separating_edge(self))
    }

    fn has_separating_edge(&self, other: &ConvexPolygon) -> bool {
        self.edges().any(|e| {
            let normal = Point::new(e.b.y - e.a.y, e.a.x - e.b.x);
            let len = normal.norm();
            let reference = normal.dot(e.a) / len;
            // Outward normal for CCW winding: everything in `self` projects <= reference.
            other
                .vertices
                .iter()
                .all(|v| normal.dot(*v) / len >= reference - TOUCH_EPS)
        })
    }

    /// Distance between the closed polygons (0 when they touch or overlap).
    pub fn distance(&self, other: &ConvexPolygon) -> f64 {
        if self.interiors_overlap(other)
            || other.vertices.iter().any(|&v| self.contains_point(v))
            || self.vertices.iter().any(|&v| other.contains_point(v))
        {
            return 0.0;
        }
        self.outline_distance(other)
    }
}
