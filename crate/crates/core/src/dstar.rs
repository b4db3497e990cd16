//! Footprint-aware D* Lite.
//!
//! The search runs backwards from the goal so that a moving start and local
//! obstacle changes only repair the affected part of the g/rhs tables. Moving
//! from `s` to an adjacent `g` costs the configured distance unless the
//! destination's detection region or the footprint swept over the move
//! touches a static or dynamic obstacle, in which case it costs infinity.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::FootprintStamp;
use crate::grid::{Cell, GridMap, Metric, Roadmap};

/// Default replanning budget in seconds.
pub const DEFAULT_BUDGET_SECS: f64 = 3.0;
/// Default node-proxy clock: seconds charged per expansion.
pub const DEFAULT_SECONDS_PER_EXPANSION: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("no finite-cost path from {start} to {goal}")]
    Unreachable { start: Cell, goal: Cell },
    #[error("planning exceeded its budget of {budget:.3}s after {expansions} expansions")]
    Timeout { budget: f64, expansions: u64 },
    #[error("{which} placement at {cell} is blocked")]
    BlockedEndpoint { which: &'static str, cell: Cell },
}

/// How planning time is measured.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Timing {
    /// Wall-clock seconds.
    #[default]
    Wall,
    /// `expansions × seconds_per_expansion`; deterministic.
    NodeProxy { seconds_per_expansion: f64 },
}

impl Timing {
    pub fn deterministic() -> Self {
        Timing::NodeProxy {
            seconds_per_expansion: DEFAULT_SECONDS_PER_EXPANSION,
        }
    }
}

/// Static obstacles plus the cells other agents occupy right now.
#[derive(Debug, Clone)]
pub struct ObstacleSnapshot {
    pub map: Arc<GridMap>,
    dynamic: Vec<bool>,
}

impl ObstacleSnapshot {
    pub fn static_only(map: Arc<GridMap>) -> Self {
        let n = map.len();
        Self {
            map,
            dynamic: vec![false; n],
        }
    }

    /// Dynamic cells outside the map are dropped; cells in `own` are removed so
    /// an agent never treats its own footprint as an obstacle.
    pub fn new(
        map: Arc<GridMap>,
        dynamic: impl IntoIterator<Item = Cell>,
        own: impl IntoIterator<Item = Cell>,
    ) -> Self {
        let mut snap = Self::static_only(map);
        for c in dynamic {
            if let Some(i) = snap.map.index(c) {
                snap.dynamic[i] = true;
            }
        }
        for c in own {
            if let Some(i) = snap.map.index(c) {
                snap.dynamic[i] = false;
            }
        }
        snap
    }

    pub fn is_blocked(&self, cell: Cell) -> bool {
        match self.map.index(cell) {
            None => true,
            Some(i) => self.dynamic[i] || self.map.is_blocked(cell),
        }
    }

    pub fn dynamic_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.dynamic.len())
            .filter(|&i| self.dynamic[i])
            .map(|i| self.map.cell_at(i))
    }
}

/// Move cost: configured distance, or infinity when the destination's
/// detection region or the swept footprint touches an obstacle.
pub fn cost(
    from: Cell,
    to: Cell,
    stamp: &FootprintStamp,
    obstacles: &ObstacleSnapshot,
    metric: Metric,
) -> f64 {
    if stamp.expanded(to).any(|c| obstacles.is_blocked(c)) {
        return f64::INFINITY;
    }
    if from == to {
        return 0.0;
    }
    match stamp.swept(from, to) {
        Some(mut cells) => {
            if cells.any(|c| obstacles.is_blocked(c)) {
                f64::INFINITY
            } else {
                metric.distance(from, to)
            }
        }
        None => f64::INFINITY,
    }
}

/// Sum of consecutive edge lengths.
pub fn path_length(waypoints: &[Cell], metric: Metric) -> f64 {
    waypoints
        .windows(2)
        .map(|w| metric.distance(w[0], w[1]))
        .sum()
}

/// An ordered start-to-goal path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidancePath {
    pub waypoints: Vec<Cell>,
    pub total_length: f64,
    pub planned_at: usize,
}

impl GuidancePath {
    pub fn new(waypoints: Vec<Cell>, metric: Metric, planned_at: usize) -> Self {
        let total_length = path_length(&waypoints, metric);
        Self {
            waypoints,
            total_length,
            planned_at,
        }
    }

    pub fn start(&self) -> Cell {
        self.waypoints[0]
    }

    pub fn goal(&self) -> Cell {
        *self.waypoints.last().expect("guidance is never empty")
    }

    /// Length from waypoint `index` to the goal.
    pub fn remaining_from(&self, index: usize, metric: Metric) -> f64 {
        path_length(&self.waypoints[index.min(self.waypoints.len() - 1)..], metric)
    }
}

impl fmt::Display for GuidancePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cells: Vec<String> = self
            .waypoints
            .iter()
            .map(|c| format!("{}:{}", c.row, c.col))
            .collect();
        f.write_str(&cells.join(" "))
    }
}

/// Cost accounting for one planning call.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanStats {
    pub expansions: u64,
    pub wall_seconds: f64,
    /// Time under the configured clock; this is what metrics use.
    pub planning_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub path: GuidancePath,
    pub stats: PlanStats,
}

/// One popped queue entry, for trace files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionRecord {
    pub cell: Cell,
    pub g: f64,
    pub rhs: f64,
    pub key: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64, f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.total_cmp(&other.1))
    }
}

const UNKNOWN: u8 = 0;
const VALID: u8 = 1;
const INVALID: u8 = 2;

/// Planner state for one agent and one goal.
#[derive(Debug, Clone)]
pub struct DStarLite {
    obstacles: ObstacleSnapshot,
    stamp: Arc<FootprintStamp>,
    roadmap: Roadmap,
    timing: Timing,
    goal: Cell,
    start: Cell,
    last: Cell,
    km: f64,
    g: Vec<f64>,
    rhs: Vec<f64>,
    queue: BTreeSet<(Key, usize)>,
    queued: Vec<Option<Key>>,
    /// Lazily computed: does the destination's detection region avoid obstacles?
    placement: Vec<u8>,
    /// Swept offsets per step that are not already part of the detection region.
    swept_extra: Vec<((i32, i32), Vec<(i32, i32)>)>,
    influence: Vec<(i32, i32)>,
    trace: Option<Vec<ExpansionRecord>>,
    planned: bool,
    last_stats: PlanStats,
}

impl DStarLite {
    pub fn new(
        obstacles: ObstacleSnapshot,
        stamp: Arc<FootprintStamp>,
        roadmap: Roadmap,
        timing: Timing,
        start: Cell,
        goal: Cell,
    ) -> Self {
        let n = obstacles.map.len();
        let expanded: BTreeSet<(i32, i32)> = stamp.expanded_offsets().iter().copied().collect();
        let swept_extra = roadmap
            .connectivity
            .steps()
            .iter()
            .map(|&(dr, dc)| {
                let to = Cell::new(0, 0);
                let from = Cell::new(-dr, -dc);
                let extra = stamp
                    .swept(from, to)
                    .expect("step belongs to connectivity")
                    .map(|c| (c.row, c.col))
                    .filter(|o| !expanded.contains(o))
                    .collect();
                ((dr, dc), extra)
            })
            .collect();
        let influence = stamp.influence_offsets().into_iter().collect();
        let mut planner = Self {
            obstacles,
            stamp,
            roadmap,
            timing,
            goal,
            start,
            last: start,
            km: 0.0,
            g: vec![f64::INFINITY; n],
            rhs: vec![f64::INFINITY; n],
            queue: BTreeSet::new(),
            queued: vec![None; n],
            placement: vec![UNKNOWN; n],
            swept_extra,
            influence,
            trace: None,
            planned: false,
            last_stats: PlanStats::default(),
        };
        if let Some(gi) = planner.obstacles.map.index(goal) {
            planner.rhs[gi] = 0.0;
            let key = planner.key(gi);
            planner.push(gi, key);
        }
        planner
    }

    /// Starts recording every expansion.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<ExpansionRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    pub fn obstacles(&self) -> &ObstacleSnapshot {
        &self.obstacles
    }

    pub fn stamp(&self) -> &FootprintStamp {
        &self.stamp
    }

    /// Cost-to-goal estimate for a cell (`g`).
    pub fn g_value(&self, cell: Cell) -> f64 {
        self.obstacles.map.index(cell).map_or(f64::INFINITY, |i| self.g[i])
    }

    pub fn rhs_value(&self, cell: Cell) -> f64 {
        self.obstacles.map.index(cell).map_or(f64::INFINITY, |i| self.rhs[i])
    }

    /// Cost of the most recent search, including searches that failed.
    pub fn last_stats(&self) -> PlanStats {
        self.last_stats
    }

    /// Number of locally inconsistent cells currently queued.
    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// True iff every queued cell is inconsistent and every inconsistent cell is queued.
    pub fn queue_matches_inconsistency(&self) -> bool {
        (0..self.g.len()).all(|i| (self.g[i] != self.rhs[i]) == self.queued[i].is_some())
    }

    fn heuristic(&self, a: Cell, b: Cell) -> f64 {
        self.roadmap.metric.distance(a, b)
    }

    fn key(&self, i: usize) -> Key {
        let m = self.g[i].min(self.rhs[i]);
        let cell = self.obstacles.map.cell_at(i);
        Key(m + self.heuristic(self.start, cell) + self.km, m)
    }

    fn push(&mut self, i: usize, key: Key) {
        if let Some(old) = self.queued[i].take() {
            self.queue.remove(&(old, i));
        }
        self.queue.insert((key, i));
        self.queued[i] = Some(key);
    }

    fn remove(&mut self, i: usize) {
        if let Some(old) = self.queued[i].take() {
            self.queue.remove(&(old, i));
        }
    }

    fn placement_ok(&mut self, i: usize) -> bool {
        match self.placement[i] {
            VALID => true,
            INVALID => false,
            _ => {
                let cell = self.obstacles.map.cell_at(i);
                let ok = !self.stamp.expanded(cell).any(|c| self.obstacles.is_blocked(c));
                self.placement[i] = if ok { VALID } else { INVALID };
                ok
            }
        }
    }

    fn edge_cost(&mut self, from: Cell, to: usize) -> f64 {
        if !self.placement_ok(to) {
            return f64::INFINITY;
        }
        let to_cell = self.obstacles.map.cell_at(to);
        let step = (to_cell.row - from.row, to_cell.col - from.col);
        let blocked = self
            .swept_extra
            .iter()
            .find(|(s, _)| *s == step)
            .is_none_or(|(_, extra)| {
                extra
                    .iter()
                    .any(|&(dr, dc)| self.obstacles.is_blocked(to_cell.offset(dr, dc)))
            });
        if blocked {
            f64::INFINITY
        } else {
            self.roadmap.metric.distance(from, to_cell)
        }
    }

    /// Neighbour indices that are on the map and not static obstacles.
    fn adjacent(&self, cell: Cell) -> impl Iterator<Item = usize> + '_ {
        self.roadmap
            .connectivity
            .steps()
            .iter()
            .map(move |&(dr, dc)| cell.offset(dr, dc))
            .filter(|&n| !self.obstacles.map.is_blocked(n))
            .filter_map(|n| self.obstacles.map.index(n))
    }

    fn best_successor(&mut self, i: usize) -> (f64, Option<usize>) {
        let cell = self.obstacles.map.cell_at(i);
        let succ: Vec<usize> = self.adjacent(cell).collect();
        let mut best = (f64::INFINITY, None);
        for s in succ {
            let c = self.edge_cost(cell, s) + self.g[s];
            if c < best.0 || (c == best.0 && best.1.is_some_and(|b| s < b)) {
                best = (c, Some(s));
            }
        }
        best
    }

    fn update_vertex(&mut self, i: usize) {
        if self.obstacles.map.cell_at(i) != self.goal {
            self.rhs[i] = self.best_successor(i).0;
        }
        if self.g[i] != self.rhs[i] {
            let key = self.key(i);
            self.push(i, key);
        } else {
            self.remove(i);
        }
    }

    fn compute_shortest_path(&mut self, budget: f64) -> Result<PlanStats, PlanError> {
        let started = Instant::now();
        let mut expansions = 0u64;
        let start = self
            .obstacles
            .map
            .index(self.start)
            .ok_or(PlanError::BlockedEndpoint {
                which: "start",
                cell: self.start,
            })?;
        loop {
            let Some(&(top_key, u)) = self.queue.first() else {
                break;
            };
            if !(top_key < self.key(start) || self.rhs[start] != self.g[start]) {
                break;
            }
            let stats = self.measure(started, expansions);
            if stats.planning_seconds > budget {
                self.last_stats = stats;
                return Err(PlanError::Timeout { budget, expansions });
            }

            self.queue.pop_first();
            self.queued[u] = None;
            let new_key = self.key(u);
            if let Some(trace) = self.trace.as_mut() {
                trace.push(ExpansionRecord {
                    cell: self.obstacles.map.cell_at(u),
                    g: self.g[u],
                    rhs: self.rhs[u],
                    key: (top_key.0, top_key.1),
                });
            }
            if top_key < new_key {
                self.push(u, new_key);
                continue;
            }
            expansions += 1;
            let cell = self.obstacles.map.cell_at(u);
            let preds: Vec<usize> = self.adjacent(cell).collect();
            if self.g[u] > self.rhs[u] {
                self.g[u] = self.rhs[u];
            } else {
                self.g[u] = f64::INFINITY;
                self.update_vertex(u);
            }
            for p in preds {
                self.update_vertex(p);
            }
        }
        self.last_stats = self.measure(started, expansions);
        Ok(self.last_stats)
    }

    fn measure(&self, started: Instant, expansions: u64) -> PlanStats {
        let wall_seconds = started.elapsed().as_secs_f64();
        let planning_seconds = match self.timing {
            Timing::Wall => wall_seconds,
            Timing::NodeProxy {
                seconds_per_expansion,
            } => expansions as f64 * seconds_per_expansion,
        };
        PlanStats {
            expansions,
            wall_seconds,
            planning_seconds,
        }
    }

    fn extract_path(&mut self, planned_at: usize) -> Result<GuidancePath, PlanError> {
        let unreachable = PlanError::Unreachable {
            start: self.start,
            goal: self.goal,
        };
        let mut cur = self.obstacles.map.index(self.start).ok_or(unreachable.clone())?;
        if self.g[cur].is_infinite() {
            return Err(unreachable);
        }
        let goal = self.obstacles.map.index(self.goal).ok_or(unreachable.clone())?;
        let mut waypoints = vec![self.start];
        while cur != goal {
            let (c, next) = self.best_successor(cur);
            match next {
                Some(n) if c.is_finite() && waypoints.len() <= self.g.len() => {
                    waypoints.push(self.obstacles.map.cell_at(n));
                    cur = n;
                }
                _ => return Err(unreachable),
            }
        }
        Ok(GuidancePath::new(waypoints, self.roadmap.metric, planned_at))
    }

    fn check_endpoints(&self) -> Result<(), PlanError> {
        for (which, cell) in [("start", self.start), ("goal", self.goal)] {
            if self.obstacles.map.is_blocked(cell) {
                return Err(PlanError::BlockedEndpoint { which, cell });
            }
        }
        Ok(())
    }

    /// Initial search from scratch.
    pub fn plan(&mut self, budget: f64, planned_at: usize) -> Result<PlanOutcome, PlanError> {
        self.check_endpoints()?;
        let stats = self.compute_shortest_path(budget)?;
        self.planned = true;
        let path = self.extract_path(planned_at)?;
        Ok(PlanOutcome { path, stats })
    }

    /// Incremental repair after `flipped` cells toggled their dynamic-obstacle
    /// status and the agent moved to `new_start`.
    pub fn replan(
        &mut self,
        flipped: &[Cell],
        new_start: Cell,
        budget: f64,
        planned_at: usize,
    ) -> Result<PlanOutcome, PlanError> {
        if !self.planned {
            self.start = new_start;
            self.last = new_start;
            for &c in flipped {
                if let Some(i) = self.obstacles.map.index(c) {
                    self.obstacles.dynamic[i] = !self.obstacles.dynamic[i];
                }
            }
            self.placement.iter_mut().for_each(|p| *p = UNKNOWN);
            return self.plan(budget, planned_at);
        }
        self.km += self.heuristic(self.last, new_start);
        self.last = new_start;
        self.start = new_start;

        let mut affected = BTreeSet::new();
        for &c in flipped {
            let Some(i) = self.obstacles.map.index(c) else {
                continue;
            };
            self.obstacles.dynamic[i] = !self.obstacles.dynamic[i];
            for &(dr, dc) in &self.influence {
                let to = c.offset(-dr, -dc);
                if let Some(ti) = self.obstacles.map.index(to) {
                    if !self.obstacles.map.is_blocked(to) {
                        affected.insert(ti);
                    }
                }
            }
        }
        let mut sources = BTreeSet::new();
        for &t in &affected {
            self.placement[t] = UNKNOWN;
            let cell = self.obstacles.map.cell_at(t);
            sources.extend(self.adjacent(cell));
        }
        for s in sources {
            self.update_vertex(s);
        }
        self.check_endpoints()?;
        let stats = self.compute_shortest_path(budget)?;
        let path = self.extract_path(planned_at)?;
        Ok(PlanOutcome { path, stats })
    }

    /// Replans against a new dynamic obstacle set; flips are derived by diffing.
    pub fn replan_to(
        &mut self,
        dynamic: &ObstacleSnapshot,
        new_start: Cell,
        budget: f64,
        planned_at: usize,
    ) -> Result<PlanOutcome, PlanError> {
        let flipped: Vec<Cell> = (0..self.obstacles.dynamic.len())
            .filter(|&i| self.obstacles.dynamic[i] != dynamic.dynamic[i])
            .map(|i| self.obstacles.map.cell_at(i))
            .collect();
        self.replan(&flipped, new_start, budget, planned_at)
    }
}

/// One-shot planning convenience.
pub fn plan(
    obstacles: ObstacleSnapshot,
    stamp: Arc<FootprintStamp>,
    roadmap: Roadmap,
    start: Cell,
    goal: Cell,
) -> Result<GuidancePath, PlanError> {
    DStarLite::new(obstacles, stamp, roadmap, Timing::Wall, start, goal)
        .plan(f64::INFINITY, 0)
        .map(|o| o.path)
}

/// Writes expansion records, one per line: `row col g rhs k1 k2`.
pub fn write_trace(records: &[ExpansionRecord], mut out: impl Write) -> io::Result<()> {
    for r in records {
        writeln!(
            out,
            "{} {} {} {} {} {}",
            r.cell.row, r.cell.col, r.g, r.rhs, r.key.0, r.key.1
        )?;
    }
    Ok(())
}
