//! The joint-step multi-agent environment.
//!
//! Every agent follows its own guidance path. Each joint step, every agent
//! picks one of `Move` (next guidance waypoint), `Wait`, `Back` (return to the
//! previous cell) or `Replan` (D* Lite around the other agents' current
//! footprints). Actions are applied simultaneously; collisions are checked at
//! the end of the step and at the midpoint of every move.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::{polygons_collide, FootprintStamp};
use crate::dstar::{
    DStarLite, GuidancePath, ObstacleSnapshot, PlanError, Timing, DEFAULT_BUDGET_SECS,
};
use crate::geometry::ConvexPolygon;
use crate::grid::{Cell, Metric, Roadmap};
use crate::rules::{action_mask, shaping_penalty, Action, ActionMask, MaskContext, RuleConfig, ShapingEvent};
use crate::scenario::Scenario;

pub const DEFAULT_LOOKAHEAD: usize = 23;
pub const DEFAULT_GOAL_REWARD: f64 = 200.0;
pub const DEFAULT_COLLISION_PENALTY: f64 = -100.0;

/// Which length normalises the per-step cost `-1 / L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepCostScale {
    /// Remaining guidance length before the step.
    #[default]
    Remaining,
    /// Length of the global guidance planned at reset.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub roadmap: Roadmap,
    /// Number of upcoming guidance placements checked for conflicts.
    pub lookahead: usize,
    pub goal_reward: f64,
    pub collision_penalty: f64,
    pub step_cost_scale: StepCostScale,
    pub rules: RuleConfig,
    /// Whether agents may call the heuristic planner (`Replan`).
    pub heuristics: bool,
    pub timing: Timing,
    /// Seconds (under `timing`) a single replan may use.
    pub replan_budget: f64,
    /// Cells travelled per second; converts planning time into length.
    pub speed: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            roadmap: Roadmap::default(),
            lookahead: DEFAULT_LOOKAHEAD,
            goal_reward: DEFAULT_GOAL_REWARD,
            collision_penalty: DEFAULT_COLLISION_PENALTY,
            step_cost_scale: StepCostScale::default(),
            rules: RuleConfig::default(),
            heuristics: true,
            timing: Timing::default(),
            replan_budget: DEFAULT_BUDGET_SECS,
            speed: 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("agent `{agent}`: global guidance failed: {source}")]
    Guidance { agent: String, source: PlanError },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("agent `{agent}` may not {action} here (allowed: {allowed})")]
    IllegalAction {
        agent: String,
        action: Action,
        allowed: String,
    },
    #[error("episode already terminated")]
    Terminated,
}

/// One agent's observation. Distances are raw; [`Observation::features`]
/// normalises them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Remaining guidance length.
    pub goal_distance: f64,
    /// Outline distance to every other agent, in agent order.
    pub agent_distances: Vec<f64>,
    /// Per lookahead step: would that guidance placement collide?
    pub path_conflicts: Vec<bool>,
    /// Perpendicular to the heading: `lookahead` cells on the left, then the right.
    pub lateral_occupied: Vec<bool>,
    pub goal_scale: f64,
    pub distance_scale: f64,
}

impl Observation {
    pub fn dim(agents: usize, lookahead: usize) -> usize {
        1 + agents.saturating_sub(1) + 3 * lookahead
    }

    pub fn features(&self) -> Vec<f64> {
        let flag = |b: &bool| if *b { 1.0 } else { 0.0 };
        let mut v = Vec::with_capacity(
            1 + self.agent_distances.len() + self.path_conflicts.len() + self.lateral_occupied.len(),
        );
        v.push(self.goal_distance / self.goal_scale);
        v.extend(self.agent_distances.iter().map(|d| d / self.distance_scale));
        v.extend(self.path_conflicts.iter().map(flag));
        v.extend(self.lateral_occupied.iter().map(flag));
        v
    }
}

/// Result of a `Replan` action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanRecord {
    pub t: usize,
    pub planning_seconds: f64,
    pub expansions: u64,
    /// The new path differed from the current guidance and replaced it.
    pub replaced: bool,
    /// Set when planning failed; the agent held position.
    pub failure: Option<String>,
}

/// Mutable per-agent state.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub id: String,
    pub goal: Cell,
    pub cell: Cell,
    /// Cells left by `Move`, most recent last; `Back` pops.
    pub history: Vec<Cell>,
    pub guidance: GuidancePath,
    /// Index of `cell` in the guidance waypoints.
    pub guidance_index: usize,
    /// Length of the guidance planned at reset.
    pub global_length: f64,
    pub traveled: f64,
    pub done: bool,
    pub collided: bool,
    pub last_action: Option<Action>,
    /// Guidance was planned while every other agent was already done.
    pub solo_guidance: bool,
    pub waits: usize,
    pub planning_seconds: f64,
    pub replans: Vec<ReplanRecord>,
    stamp: Arc<FootprintStamp>,
    planner: DStarLite,
}

impl AgentState {
    pub fn stamp(&self) -> &FootprintStamp {
        &self.stamp
    }

    pub fn outline(&self) -> ConvexPolygon {
        self.stamp.model().at_cell(self.cell)
    }

    pub fn remaining(&self, metric: Metric) -> f64 {
        self.guidance.remaining_from(self.guidance_index, metric)
    }

    fn waypoint_ahead(&self, k: usize) -> Cell {
        let w = &self.guidance.waypoints;
        w[(self.guidance_index + k).min(w.len() - 1)]
    }

    fn heading(&self) -> (i32, i32) {
        let w = &self.guidance.waypoints;
        let (from, to) = if self.guidance_index + 1 < w.len() {
            (self.cell, w[self.guidance_index + 1])
        } else if let Some(&prev) = self.history.last() {
            (prev, self.cell)
        } else {
            return (0, 1);
        };
        ((to.row - from.row).signum(), (to.col - from.col).signum())
    }
}

/// Per-agent details of one joint step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub action: Action,
    /// What actually happened: `Back` with empty history becomes `Wait`.
    pub effective: Action,
    pub cell: Cell,
    pub reward: f64,
    pub collided: bool,
    pub reached_goal: bool,
    pub done: bool,
    pub planning_seconds: f64,
    pub remaining: f64,
    pub replan: Option<ReplanRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Observation>,
    pub masks: Vec<ActionMask>,
    pub rewards: Vec<f64>,
    pub shared_reward: f64,
    /// All agents done, or a collision.
    pub terminated: bool,
    /// Step limit reached without termination.
    pub truncated: bool,
    pub agents: Vec<AgentStep>,
    pub shaping: Vec<ShapingEvent>,
}

impl StepOutcome {
    pub fn finished(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Path-level metrics of one episode, in cell lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Travelled plus still-remaining length, minus the global guidance length.
    pub added: f64,
    /// Planning seconds times speed.
    pub planning: f64,
    /// Wait steps of agents that were not yet done.
    pub waiting: f64,
    pub total: f64,
    pub success: bool,
    pub steps: usize,
}

impl EpisodeMetrics {
    #[allow(clippy::too_many_arguments)]
    /// Per-agent inputs in agent order; summation order is fixed so that
    /// recomputing from a trace reproduces the exact same floats.
    pub fn from_agents(
        traveled: &[f64],
        remaining: &[f64],
        global: &[f64],
        planning_seconds: &[f64],
        waits: &[usize],
        speed: f64,
        success: bool,
        steps: usize,
    ) -> Self {
        let added = (0..traveled.len())
            .map(|i| traveled[i] + remaining[i] - global[i])
            .sum::<f64>();
        let planning = planning_seconds.iter().sum::<f64>() * speed;
        let waiting = waits.iter().sum::<usize>() as f64;
        Self {
            added,
            planning,
            waiting,
            total: added + planning + waiting,
            success,
            steps,
        }
    }
}

/// Snapshot of who threatens whom, computed once per step.
struct Analysis {
    outlines: Vec<ConvexPolygon>,
    conflicts: Vec<Vec<bool>>,
    risk_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Environment {
    scenario: Scenario,
    config: EnvConfig,
    initial: Vec<AgentState>,
    agents: Vec<AgentState>,
    t: usize,
    terminated: bool,
    truncated: bool,
    records: Vec<StepRecord>,
}

impl Environment {
    /// Plans every agent's global guidance on the static map.
    pub fn new(scenario: Scenario, config: EnvConfig) -> Result<Self, EnvError> {
        let d = scenario.safety_distance;
        let mut stamps: BTreeMap<String, Arc<FootprintStamp>> = BTreeMap::new();
        let mut agents = Vec::with_capacity(scenario.agents.len());
        for spec in &scenario.agents {
            let stamp = stamps
                .entry(spec.footprint.clone())
                .or_insert_with(|| {
                    Arc::new(FootprintStamp::new(
                        spec.model.clone(),
                        d,
                        config.roadmap.connectivity,
                    ))
                })
                .clone();
            let mut planner = DStarLite::new(
                ObstacleSnapshot::static_only(scenario.map.clone()),
                stamp.clone(),
                config.roadmap,
                config.timing,
                spec.start,
                spec.goal,
            );
            let outcome =
                planner
                    .plan(f64::INFINITY, 0)
                    .map_err(|source| EnvError::Guidance {
                        agent: spec.id.clone(),
                        source,
                    })?;
            let global_length = outcome.path.total_length;
            agents.push(AgentState {
                id: spec.id.clone(),
                goal: spec.goal,
                cell: spec.start,
                history: Vec::new(),
                guidance: outcome.path,
                guidance_index: 0,
                global_length,
                traveled: 0.0,
                done: spec.start == spec.goal,
                collided: false,
                last_action: None,
                solo_guidance: false,
                waits: 0,
                planning_seconds: 0.0,
                replans: Vec::new(),
                stamp,
                planner,
            });
        }
        Ok(Self {
            scenario,
            config,
            initial: agents.clone(),
            agents,
            t: 0,
            terminated: false,
            truncated: false,
            records: Vec::new(),
        })
    }

    /// Restores the state right after global planning.
    pub fn reset(&mut self) -> Vec<Observation> {
        self.agents = self.initial.clone();
        self.t = 0;
        self.terminated = self.agents.iter().all(|a| a.done);
        self.truncated = false;
        self.records.clear();
        self.observations()
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_finished(&self) -> bool {
        self.terminated || self.truncated
    }

    pub fn observation_dim(&self) -> usize {
        Observation::dim(self.agents.len(), self.config.lookahead)
    }

    fn analyse(&self) -> Analysis {
        let d = self.scenario.safety_distance;
        let map = &self.scenario.map;
        let n = self.agents.len();
        let outlines: Vec<ConvexPolygon> = self.agents.iter().map(AgentState::outline).collect();
        let mut threat = vec![vec![false; n]; n];
        let conflicts = (0..n)
            .map(|i| {
                let a = &self.agents[i];
                (1..=self.config.lookahead)
                    .map(|k| {
                        let cell = a.waypoint_ahead(k);
                        let mut hit = a.stamp.static_collision(cell, map);
                        let poly = a.stamp.model().at_cell(cell);
                        for j in (0..n).filter(|&j| j != i) {
                            if polygons_collide(&poly, &outlines[j], d) {
                                threat[i][j] = true;
                                hit = true;
                            }
                        }
                        hit
                    })
                    .collect()
            })
            .collect();
        let mut risk_pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if threat[i][j] || threat[j][i] {
                    risk_pairs.push((i, j));
                }
            }
        }
        Analysis {
            outlines,
            conflicts,
            risk_pairs,
        }
    }

    fn observe(&self, analysis: &Analysis) -> Vec<Observation> {
        let metric = self.config.roadmap.metric;
        let map = &self.scenario.map;
        let mut occupancy: BTreeMap<Cell, usize> = BTreeMap::new();
        for a in &self.agents {
            for c in a.stamp.covered(a.cell) {
                *occupancy.entry(c).or_default() += 1;
            }
        }
        let distance_scale = map.diagonal().max(1.0);
        self.agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let own: HashSet<Cell> = a.stamp.covered(a.cell).collect();
                let others_occupy = |c: Cell| {
                    occupancy.get(&c).copied().unwrap_or(0) > usize::from(own.contains(&c))
                };
                let (dr, dc) = a.heading();
                let mut lateral = Vec::with_capacity(2 * self.config.lookahead);
                for (pr, pc) in [(-dc, dr), (dc, -dr)] {
                    for k in 1..=self.config.lookahead as i32 {
                        let c = a.cell.offset(k * pr, k * pc);
                        lateral.push(map.is_blocked(c) || others_occupy(c));
                    }
                }
                Observation {
                    goal_distance: a.remaining(metric),
                    agent_distances: (0..self.agents.len())
                        .filter(|&j| j != i)
                        .map(|j| analysis.outlines[i].distance(&analysis.outlines[j]))
                        .collect(),
                    path_conflicts: analysis.conflicts[i].clone(),
                    lateral_occupied: lateral,
                    goal_scale: if a.global_length > 0.0 { a.global_length } else { 1.0 },
                    distance_scale,
                }
            })
            .collect()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.observe(&self.analyse())
    }

    fn mask_for(&self, i: usize, conflicts: &[bool]) -> ActionMask {
        let a = &self.agents[i];
        let others: Vec<&AgentState> = (0..self.agents.len())
            .filter(|&j| j != i)
            .map(|j| &self.agents[j])
            .collect();
        let active_others: Vec<&&AgentState> = others.iter().filter(|o| !o.done).collect();
        let ctx = MaskContext {
            done: a.done,
            collided: a.collided,
            all_others_done: !others.is_empty() && active_others.is_empty(),
            guidance_stale: !a.solo_guidance,
            route_longer_than_global: a.traveled + a.remaining(self.config.roadmap.metric)
                > a.global_length + 1e-9,
            lookahead_conflicts: conflicts,
            previous_action: a.last_action,
            all_others_waited: !active_others.is_empty()
                && active_others.iter().all(|o| o.last_action == Some(Action::Wait)),
            heuristics: self.config.heuristics,
        };
        action_mask(&ctx, &self.config.rules)
    }

    fn masks_from(&self, analysis: &Analysis) -> Vec<ActionMask> {
        (0..self.agents.len())
            .map(|i| self.mask_for(i, &analysis.conflicts[i]))
            .collect()
    }

    pub fn masks(&self) -> Vec<ActionMask> {
        self.masks_from(&self.analyse())
    }

    /// Applies one joint action.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome, EnvError> {
        if self.is_finished() {
            return Err(EnvError::Terminated);
        }
        let n = self.agents.len();
        if actions.len() != n {
            return Err(EnvError::ActionCount {
                expected: n,
                got: actions.len(),
            });
        }
        let before = self.analyse();
        let masks = self.masks_from(&before);
        for (i, (&action, mask)) in actions.iter().zip(&masks).enumerate() {
            if !mask.allows(action) {
                return Err(EnvError::IllegalAction {
                    agent: self.agents[i].id.clone(),
                    action,
                    allowed: mask.actions().map(|a| a.name()).collect::<Vec<_>>().join(","),
                });
            }
        }

        let metric = self.config.roadmap.metric;
        let active: Vec<bool> = self.agents.iter().map(|a| !a.done).collect();
        let prev_cells: Vec<Cell> = self.agents.iter().map(|a| a.cell).collect();
        let remaining_before: Vec<f64> = self.agents.iter().map(|a| a.remaining(metric)).collect();
        let others_done_before: Vec<bool> = (0..n)
            .map(|i| n > 1 && (0..n).filter(|&j| j != i).all(|j| !active[j]))
            .collect();
        let covered_before: Vec<Vec<Cell>> = self
            .agents
            .iter()
            .map(|a| a.stamp.covered(a.cell).collect())
            .collect();

        let mut effective = actions.to_vec();
        let mut planning = vec![0.0; n];
        let mut replans: Vec<Option<ReplanRecord>> = vec![None; n];
        for i in 0..n {
            if !active[i] {
                effective[i] = Action::Wait;
                continue;
            }
            match actions[i] {
                Action::Move => {
                    if !self.apply_move(i) {
                        effective[i] = Action::Wait;
                        self.agents[i].waits += 1;
                    }
                }
                Action::Wait => self.agents[i].waits += 1,
                Action::Back => {
                    if !self.apply_back(i) {
                        effective[i] = Action::Wait;
                        self.agents[i].waits += 1;
                    }
                }
                Action::Replan => {
                    let dynamic = (0..n)
                        .filter(|&j| j != i)
                        .flat_map(|j| covered_before[j].iter().copied());
                    let record = self.apply_replan(i, dynamic, others_done_before[i]);
                    planning[i] = record.planning_seconds;
                    replans[i] = Some(record);
                }
            }
            self.agents[i].planning_seconds += planning[i];
            self.agents[i].last_action = Some(actions[i]);
        }

        // Collisions: static, then pairwise at the end of the step and mid-move.
        let d = self.scenario.safety_distance;
        let mut collided = vec![false; n];
        for i in (0..n).filter(|&i| active[i]) {
            if self.agents[i].stamp.static_collision(self.agents[i].cell, &self.scenario.map) {
                collided[i] = true;
            }
        }
        let end: Vec<ConvexPolygon> = self.agents.iter().map(AgentState::outline).collect();
        let mid: Vec<ConvexPolygon> = (0..n)
            .map(|i| {
                let (a, b) = (prev_cells[i], self.agents[i].cell);
                self.agents[i].stamp.model().at(
                    f64::from(a.col + b.col) / 2.0,
                    f64::from(a.row + b.row) / 2.0,
                )
            })
            .collect();
        for i in 0..n {
            for j in i + 1..n {
                let moved = prev_cells[i] != self.agents[i].cell || prev_cells[j] != self.agents[j].cell;
                if polygons_collide(&end[i], &end[j], d)
                    || (moved && polygons_collide(&mid[i], &mid[j], d))
                {
                    collided[i] = true;
                    collided[j] = true;
                }
            }
        }

        let (shaping, events) =
            shaping_penalty(actions, &active, &before.risk_pairs, &self.config.rules);
        let mut rewards = vec![0.0; n];
        let mut reached = vec![false; n];
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let a = &mut self.agents[i];
            if collided[i] {
                a.collided = true;
                rewards[i] = self.config.collision_penalty;
            } else if a.cell == a.goal {
                a.done = true;
                reached[i] = true;
                rewards[i] = self.config.goal_reward;
            } else {
                let scale = match self.config.step_cost_scale {
                    StepCostScale::Remaining => remaining_before[i],
                    StepCostScale::Initial => a.global_length,
                };
                rewards[i] = -1.0 / scale.max(1.0);
            }
            rewards[i] += shaping[i];
        }
        for a in self.agents.iter_mut().filter(|a| a.done) {
            a.last_action = Some(Action::Wait);
        }

        self.t += 1;
        let any_collision = collided.iter().any(|&c| c);
        self.terminated = any_collision || self.agents.iter().all(|a| a.done);
        self.truncated = !self.terminated && self.t >= self.scenario.step_limit;

        let agent_steps: Vec<AgentStep> = (0..n)
            .map(|i| {
                let a = &self.agents[i];
                AgentStep {
                    action: actions[i],
                    effective: effective[i],
                    cell: a.cell,
                    reward: rewards[i],
                    collided: collided[i],
                    reached_goal: reached[i],
                    done: a.done,
                    planning_seconds: planning[i],
                    remaining: a.remaining(metric),
                    replan: replans[i].clone(),
                }
            })
            .collect();
        self.records.push(StepRecord {
            t: self.t - 1,
            agents: agent_steps
                .iter()
                .map(|s| AgentRecord {
                    cell: s.cell,
                    action: s.action,
                    effective: s.effective,
                    reward: s.reward,
                    collided: s.collided,
                    done: s.done,
                    planning_seconds: s.planning_seconds,
                    remaining: s.remaining,
                })
                .collect(),
        });

        let after = self.analyse();
        let shared_reward = rewards.iter().sum::<f64>() / n as f64;
        Ok(StepOutcome {
            observations: self.observe(&after),
            masks: self.masks_from(&after),
            rewards,
            shared_reward,
            terminated: self.terminated,
            truncated: self.truncated,
            agents: agent_steps,
            shaping: events,
        })
    }

    /// Returns false at the end of the guidance.
    fn apply_move(&mut self, i: usize) -> bool {
        let metric = self.config.roadmap.metric;
        let a = &mut self.agents[i];
        let Some(&next) = a.guidance.waypoints.get(a.guidance_index + 1) else {
            return false;
        };
        a.history.push(a.cell);
        a.traveled += metric.distance(a.cell, next);
        a.cell = next;
        a.guidance_index += 1;
        true
    }

    /// Returns false when there is nowhere to go back to.
    fn apply_back(&mut self, i: usize) -> bool {
        let metric = self.config.roadmap.metric;
        let a = &mut self.agents[i];
        let Some(prev) = a.history.pop() else {
            return false;
        };
        a.traveled += metric.distance(a.cell, prev);
        a.cell = prev;
        if a.guidance_index > 0 && a.guidance.waypoints[a.guidance_index - 1] == prev {
            a.guidance_index -= 1;
        } else {
            let mut waypoints = a.guidance.waypoints[a.guidance_index..].to_vec();
            waypoints.insert(0, prev);
            a.guidance = GuidancePath::new(waypoints, metric, a.guidance.planned_at);
            a.guidance_index = 0;
        }
        true
    }

    fn apply_replan(
        &mut self,
        i: usize,
        dynamic: impl Iterator<Item = Cell>,
        others_done: bool,
    ) -> ReplanRecord {
        let t = self.t;
        let budget = self.config.replan_budget;
        let map = self.scenario.map.clone();
        let a = &mut self.agents[i];
        let own: Vec<Cell> = a.stamp.covered(a.cell).collect();
        let snapshot = ObstacleSnapshot::new(map, dynamic, own);
        match a.planner.replan_to(&snapshot, a.cell, budget, t) {
            Ok(outcome) => {
                let replaced = outcome.path.waypoints != a.guidance.waypoints[a.guidance_index..];
                if replaced {
                    a.guidance = outcome.path;
                    a.guidance_index = 0;
                }
                a.solo_guidance |= others_done;
                let record = ReplanRecord {
                    t,
                    planning_seconds: outcome.stats.planning_seconds,
                    expansions: outcome.stats.expansions,
                    replaced,
                    failure: None,
                };
                a.replans.push(record.clone());
                record
            }
            Err(e) => {
                let stats = a.planner.last_stats();
                let record = ReplanRecord {
                    t,
                    planning_seconds: match e {
                        PlanError::Timeout { budget, .. } => budget.max(stats.planning_seconds),
                        _ => stats.planning_seconds,
                    },
                    expansions: stats.expansions,
                    replaced: false,
                    failure: Some(e.to_string()),
                };
                a.replans.push(record.clone());
                record
            }
        }
    }

    pub fn success(&self) -> bool {
        self.agents.iter().all(|a| a.done && !a.collided)
    }

    /// Metrics aggregated from live agent state.
    pub fn metrics(&self) -> EpisodeMetrics {
        let metric = self.config.roadmap.metric;
        let traveled: Vec<f64> = self.agents.iter().map(|a| a.traveled).collect();
        let remaining: Vec<f64> = self.agents.iter().map(|a| a.remaining(metric)).collect();
        let global: Vec<f64> = self.agents.iter().map(|a| a.global_length).collect();
        let planning: Vec<f64> = self.agents.iter().map(|a| a.planning_seconds).collect();
        let waits: Vec<usize> = self.agents.iter().map(|a| a.waits).collect();
        EpisodeMetrics::from_agents(
            &traveled,
            &remaining,
            &global,
            &planning,
            &waits,
            self.config.speed,
            self.success(),
            self.t,
        )
    }

    pub fn trace(&self) -> EpisodeTrace {
        EpisodeTrace {
            metric: self.config.roadmap.metric,
            speed: self.config.speed,
            agents: self
                .initial
                .iter()
                .map(|a| TraceAgent {
                    id: a.id.clone(),
                    start: a.cell,
                    global_length: a.global_length,
                    remaining: a.remaining(self.config.roadmap.metric),
                })
                .collect(),
            steps: self.records.clone(),
        }
    }
}

/// One agent's row in a trace step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub cell: Cell,
    pub action: Action,
    pub effective: Action,
    pub reward: f64,
    pub collided: bool,
    pub done: bool,
    pub planning_seconds: f64,
    pub remaining: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub agents: Vec<AgentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceAgent {
    pub id: String,
    pub start: Cell,
    pub global_length: f64,
    /// Guidance length at reset.
    pub remaining: f64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Everything needed to replay an episode and recompute its metrics.
///
/// Text format; floats use the shortest representation that parses back to
/// the same value:
///
/// ```text
/// metric euclidean
/// speed 1
/// agent a0 10 5 48 48
/// step 0 | 10 6 Move Move -0.0208 0 0 0 47 | ...
/// ```
///
/// `agent` lines are `id start_row start_col global_length remaining`; each
/// step segment is `row col action effective reward collided done
/// planning_seconds remaining`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub metric: Metric,
    pub speed: f64,
    pub agents: Vec<TraceAgent>,
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn write(&self, mut out: impl Write) -> io::Result<()> {
        write!(out, "{self}")
    }

    pub fn read(input: impl BufRead) -> Result<Self, TraceError> {
        let mut text = String::new();
        for line in input.lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut metric = Metric::default();
        let mut speed = 1.0;
        let mut agents = Vec::new();
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| TraceError::Syntax { line, message };
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let mut head = content.split_whitespace();
            match head.next() {
                Some("metric") => {
                    metric = head
                        .next()
                        .unwrap_or_default()
                        .parse()
                        .map_err(err)?;
                }
                Some("speed") => {
                    speed = parse_num(head.next(), "speed").map_err(err)?;
                }
                Some("agent") => {
                    let t: Vec<&str> = head.collect();
                    if t.len() != 5 {
                        return Err(err(format!("expected 5 agent fields, got {}", t.len())));
                    }
                    agents.push(TraceAgent {
                        id: t[0].to_string(),
                        start: Cell::new(
                            parse_num(Some(t[1]), "row").map_err(err)?,
                            parse_num(Some(t[2]), "col").map_err(err)?,
                        ),
                        global_length: parse_num(Some(t[3]), "global length").map_err(err)?,
                        remaining: parse_num(Some(t[4]), "remaining").map_err(err)?,
                    });
                }
                Some("step") => {
                    let mut parts = content["step".len()..].split('|');
                    let t = parse_num(parts.next().map(str::trim), "step index").map_err(err)?;
                    let mut records = Vec::new();
                    for part in parts {
                        records.push(parse_agent_record(part).map_err(err)?);
                    }
                    if records.len() != agents.len() {
                        return Err(err(format!(
                            "expected {} agent records, got {}",
                            agents.len(),
                            records.len()
                        )));
                    }
                    steps.push(StepRecord { t, agents: records });
                }
                Some(other) => return Err(err(format!("unknown line kind `{other}`"))),
                None => {}
            }
        }
        Ok(Self {
            metric,
            speed,
            agents,
            steps,
        })
    }

    /// Recomputes metrics from the recorded steps alone.
    pub fn metrics(&self) -> EpisodeMetrics {
        let n = self.agents.len();
        let mut traveled = vec![0.0; n];
        let mut planning = vec![0.0; n];
        let mut waits = vec![0usize; n];
        let mut remaining: Vec<f64> = self.agents.iter().map(|a| a.remaining).collect();
        let mut cells: Vec<Cell> = self.agents.iter().map(|a| a.start).collect();
        let mut done = vec![false; n];
        let mut collided = false;
        for step in &self.steps {
            for (i, r) in step.agents.iter().enumerate() {
                if !done[i] && r.effective == Action::Wait {
                    waits[i] += 1;
                }
                if r.cell != cells[i] {
                    traveled[i] += self.metric.distance(cells[i], r.cell);
                    cells[i] = r.cell;
                }
                planning[i] += r.planning_seconds;
                remaining[i] = r.remaining;
                done[i] = r.done;
                collided |= r.collided;
            }
        }
        let global: Vec<f64> = self.agents.iter().map(|a| a.global_length).collect();
        let success = !collided && done.iter().all(|&d| d);
        EpisodeMetrics::from_agents(
            &traveled,
            &remaining,
            &global,
            &planning,
            &waits,
            self.speed,
            success,
            self.steps.len(),
        )
    }
}

fn parse_num<T: std::str::FromStr>(s: Option<&str>, what: &str) -> Result<T, String> {
    let s = s.ok_or_else(|| format!("missing {what}"))?;
    s.parse().map_err(|_| format!("bad {what} `{s}`"))
}

fn parse_agent_record(part: &str) -> Result<AgentRecord, String> {
    let t: Vec<&str> = part.split_whitespace().collect();
    if t.len() != 9 {
        return Err(format!("expected 9 fields per agent, got {}", t.len()));
    }
    let flag = |s: &str, what: &str| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("bad {what} flag `{s}`")),
    };
    Ok(AgentRecord {
        cell: Cell::new(parse_num(Some(t[0]), "row")?, parse_num(Some(t[1]), "col")?),
        action: t[2].parse()?,
        effective: t[3].parse()?,
        reward: parse_num(Some(t[4]), "reward")?,
        collided: flag(t[5], "collided")?,
        done: flag(t[6], "done")?,
        planning_seconds: parse_num(Some(t[7]), "planning time")?,
        remaining: parse_num(Some(t[8]), "remaining")?,
    })
}

impl fmt::Display for EpisodeTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let metric = match self.metric {
            Metric::Euclidean => "euclidean",
            Metric::Manhattan => "manhattan",
        };
        writeln!(f, "metric {metric}")?;
        writeln!(f, "speed {}", self.speed)?;
        for a in &self.agents {
            writeln!(
                f,
                "agent {} {} {} {} {}",
                a.id, a.start.row, a.start.col, a.global_length, a.remaining
            )?;
        }
        for s in &self.steps {
            write!(f, "step {}", s.t)?;
            for r in &s.agents {
                write!(
                    f,
                    " | {} {} {} {} {} {} {} {} {}",
                    r.cell.row,
                    r.cell.col,
                    r.action,
                    r.effective,
                    r.reward,
                    u8::from(r.collided),
                    u8::from(r.done),
                    r.planning_seconds,
                    r.remaining
                )?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::FootprintLibrary;
    use crate::grid::GridMap;
    use crate::rules::RuleConfig;

    fn env(text: &str, rules: RuleConfig) -> Environment {
        let map = Arc::new(GridMap::parse(
            "type octile\nheight 5\nwidth 8\nmap\n........\n........\n@@@@@@@@\n........\n........\n",
        )
        .unwrap());
        let scenario = Scenario::parse(text, map, &FootprintLibrary::builtin()).unwrap();
        Environment::new(
            scenario,
            EnvConfig {
                rules,
                lookahead: 3,
                timing: Timing::deterministic(),
                ..EnvConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn observation_dimension() {
        let e = env("a unit 0 0 0 7\nb unit 4 0 4 7\n", RuleConfig::on());
        let obs = e.observations();
        assert_eq!(obs[0].features().len(), Observation::dim(2, 3));
        assert_eq!(Observation::dim(2, 23), 71);
        assert_eq!(obs[0].goal_distance, 7.0);
        assert_eq!(obs[0].features()[0], 1.0);
    }

    #[test]
    fn disjoint_agents_reach_goals() {
        let mut e = env("a unit 0 0 0 7\nb unit 4 0 4 7\n", RuleConfig::on());
        e.reset();
        let mut last = None;
        while !e.is_finished() {
            let masks = e.masks();
            assert!(masks.iter().all(|m| m.count() == 1));
            let acts: Vec<Action> = masks.iter().map(|m| m.actions().next().unwrap()).collect();
            last = Some(e.step(&acts).unwrap());
        }
        let last = last.unwrap();
        assert!(last.terminated && e.success());
        assert_eq!(last.rewards, vec![200.0, 200.0]);
        let m = e.metrics();
        assert_eq!(m.added, 0.0);
        assert_eq!(m.waiting, 0.0);
        assert_eq!(m.steps, 7);
    }

    #[test]
    fn head_on_move_collides_and_illegal_move_is_rejected() {
        let mut e = env("a unit 0 0 0 3\nb unit 0 3 0 0\n", RuleConfig::off());
        e.step(&[Action::Move, Action::Move]).unwrap();
        // Now a at (0,1), b at (0,2): the next moves swap cells.
        let out = e.step(&[Action::Move, Action::Move]).unwrap();
        assert!(out.terminated);
        assert_eq!(out.rewards, vec![-100.0, -100.0]);

        let mut e = env("a unit 0 0 0 3\nb unit 0 3 0 0\n", RuleConfig::on());
        e.step(&[Action::Move, Action::Move]).unwrap();
        assert!(!e.masks()[0].allows(Action::Move));
        assert!(matches!(
            e.step(&[Action::Move, Action::Wait]),
            Err(EnvError::IllegalAction { .. })
        ));
    }

    #[test]
    fn back_without_history_degrades_to_wait() {
        let mut e = env("a unit 0 0 0 7\nb unit 0 5 0 2\n", RuleConfig::off());
        let out = e.step(&[Action::Back, Action::Wait]).unwrap();
        assert_eq!(out.agents[0].effective, Action::Wait);
        assert_eq!(e.agents()[0].waits, 1);
    }

    #[test]
    fn move_then_back_restores_guidance() {
        let mut e = env("a unit 0 0 0 7\nb unit 4 0 4 7\n", RuleConfig::off());
        e.step(&[Action::Move, Action::Wait]).unwrap();
        e.step(&[Action::Back, Action::Wait]).unwrap();
        let a = &e.agents()[0];
        assert_eq!(a.cell, Cell::new(0, 0));
        assert_eq!(a.guidance_index, 0);
        assert_eq!(a.traveled, 2.0);
        assert_eq!(e.metrics().added, 2.0);
    }

    #[test]
    fn trace_round_trips_and_reproduces_metrics() {
        let mut e = env("a unit 0 0 0 7\nb unit 0 7 1 0\n", RuleConfig::off());
        let plan = [
            [Action::Move, Action::Replan],
            [Action::Move, Action::Wait],
            [Action::Back, Action::Move],
        ];
        for acts in plan {
            if e.is_finished() {
                break;
            }
            e.step(&acts).unwrap();
        }
        let trace = e.trace();
        let parsed = EpisodeTrace::parse(&trace.to_string()).unwrap();
        assert_eq!(parsed, trace);
        assert_eq!(parsed.metrics(), e.metrics());
    }
}
