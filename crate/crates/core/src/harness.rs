//! Evaluation harness: episode runner, baseline controllers, generated
//! conflict suites and cost reports.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::{polygons_collide, FootprintLibrary, FootprintStamp, PolygonModel};
use crate::dstar::{self, ObstacleSnapshot};
use crate::env::{EnvConfig, EnvError, Environment, EpisodeMetrics, EpisodeTrace, Observation};
use crate::grid::{Cell, GridMap, MapError, Roadmap};
use crate::mappo::{Checkpoint, LearnedController, TrainConfig, TrainError};
use crate::rules::{Action, ActionMask, RuleConfig};
use crate::scenario::{AgentSpec, Scenario, ScenarioError, DEFAULT_STEP_LIMIT};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("suite generation: {0}")]
    Generation(String),
    #[error("checkpoint expects {expected} agents with {obs_dim}-dim observations, scenario has {agents} agents with {got}")]
    CheckpointMismatch {
        expected: usize,
        obs_dim: usize,
        agents: usize,
        got: usize,
    },
}

/// Chooses one joint action per step.
pub trait Controller {
    fn name(&self) -> &str;
    fn reset(&mut self, agents: usize);
    fn act(
        &mut self,
        env: &Environment,
        observations: &[Observation],
        masks: &[ActionMask],
        rng: &mut ChaCha8Rng,
    ) -> Vec<Action>;
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub metrics: EpisodeMetrics,
    pub trace: EpisodeTrace,
    /// Undiscounted sum of the shared reward.
    pub total_reward: f64,
}

/// Resets `env` and runs it to the end with `controller`.
pub fn run_episode(
    env: &mut Environment,
    controller: &mut dyn Controller,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeResult, EnvError> {
    let mut observations = env.reset();
    let mut masks = env.masks();
    controller.reset(env.num_agents());
    let mut total_reward = 0.0;
    while !env.is_finished() {
        let actions = controller.act(env, &observations, &masks, rng);
        let out = env.step(&actions)?;
        total_reward += out.shared_reward;
        observations = out.observations;
        masks = out.masks;
    }
    let metrics = env.metrics();
    debug_assert!(metrics.added >= -1e-9, "added cost below zero: {}", metrics.added);
    Ok(EpisodeResult {
        metrics,
        trace: env.trace(),
        total_reward,
    })
}

/// Follows the guidance and replans whenever the next step is conflicted.
/// Never waits or backs up of its own accord.
#[derive(Debug, Clone, Default)]
pub struct PureReplanner;

impl Controller for PureReplanner {
    fn name(&self) -> &str {
        "replanner"
    }

    fn reset(&mut self, _agents: usize) {}

    fn act(
        &mut self,
        env: &Environment,
        observations: &[Observation],
        masks: &[ActionMask],
        _rng: &mut ChaCha8Rng,
    ) -> Vec<Action> {
        env.agents()
            .iter()
            .zip(observations)
            .zip(masks)
            .map(|((agent, obs), mask)| {
                if agent.done || agent.collided {
                    return Action::Wait;
                }
                let wanted = if obs.path_conflicts.first().copied().unwrap_or(false) {
                    Action::Replan
                } else {
                    Action::Move
                };
                if mask.allows(wanted) {
                    wanted
                } else {
                    mask.actions().next().unwrap_or(Action::Wait)
                }
            })
            .collect()
    }
}

/// Takes the first allowed action in a fixed preference order, replanning
/// at most every other step.
#[derive(Debug, Clone, Default)]
pub struct RuleOnly;

impl Controller for RuleOnly {
    fn name(&self) -> &str {
        "rules"
    }

    fn reset(&mut self, _agents: usize) {}

    fn act(
        &mut self,
        env: &Environment,
        _observations: &[Observation],
        masks: &[ActionMask],
        _rng: &mut ChaCha8Rng,
    ) -> Vec<Action> {
        env.agents()
            .iter()
            .zip(masks)
            .map(|(agent, mask)| {
                let replanned = agent.last_action == Some(Action::Replan);
                [Action::Move, Action::Replan, Action::Wait, Action::Back]
                    .into_iter()
                    .filter(|&a| !(a == Action::Replan && replanned))
                    .find(|&a| mask.allows(a))
                    .unwrap_or(Action::Wait)
            })
            .collect()
    }
}

/// Which controller drives an evaluation.
#[derive(Debug, Clone)]
pub enum PolicyKind {
    Learned(Box<Checkpoint>),
    PureReplanner,
    RuleOnly,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Learned(_) => "learned",
            PolicyKind::PureReplanner => "replanner",
            PolicyKind::RuleOnly => "rules",
        }
    }

    pub fn controller(&self) -> Box<dyn Controller + Send> {
        match self {
            PolicyKind::Learned(cp) => Box::new(LearnedController::new(cp.model.clone(), true)),
            PolicyKind::PureReplanner => Box::new(PureReplanner),
            PolicyKind::RuleOnly => Box::new(RuleOnly),
        }
    }

    /// Environment settings the policy runs under: a learned policy uses the
    /// config it was trained with, the replanner runs without rule masks.
    pub fn env_config(&self, base: &EnvConfig) -> EnvConfig {
        match self {
            PolicyKind::Learned(cp) => EnvConfig {
                timing: base.timing,
                replan_budget: base.replan_budget,
                speed: base.speed,
                ..cp.env.clone()
            },
            PolicyKind::PureReplanner => EnvConfig {
                rules: RuleConfig::off(),
                heuristics: true,
                ..base.clone()
            },
            PolicyKind::RuleOnly => EnvConfig {
                rules: RuleConfig::on(),
                heuristics: true,
                ..base.clone()
            },
        }
    }
}

/// One row of a suite report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case: String,
    pub added: f64,
    pub planning: f64,
    pub waiting: f64,
    pub total: f64,
    pub success: bool,
    pub steps: usize,
    pub reward: f64,
    pub error: String,
}

impl CaseRow {
    fn from_result(case: String, r: &EpisodeResult) -> Self {
        Self {
            case,
            added: r.metrics.added,
            planning: r.metrics.planning,
            waiting: r.metrics.waiting,
            total: r.metrics.total,
            success: r.metrics.success,
            steps: r.metrics.steps,
            reward: r.total_reward,
            error: String::new(),
        }
    }

    fn failed(case: String, error: String) -> Self {
        Self {
            case,
            added: 0.0,
            planning: 0.0,
            waiting: 0.0,
            total: 0.0,
            success: false,
            steps: 0,
            reward: 0.0,
            error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub policy: String,
    pub rows: Vec<CaseRow>,
    pub traces: Vec<Option<EpisodeTrace>>,
}

impl SuiteReport {
    pub fn totals(&self) -> [f64; 4] {
        let mut t = [0.0; 4];
        for r in &self.rows {
            t[0] += r.added;
            t[1] += r.planning;
            t[2] += r.waiting;
            t[3] += r.total;
        }
        t
    }

    pub fn means(&self) -> [f64; 4] {
        let n = self.rows.len().max(1) as f64;
        self.totals().map(|v| v / n)
    }

    pub fn success_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.success).count() as f64 / self.rows.len() as f64
    }

    pub fn mean_reward(&self) -> f64 {
        self.rows.iter().map(|r| r.reward).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Per-case rows followed by `total` and `mean` rows.
    pub fn write_csv(&self, out: impl std::io::Write) -> Result<(), HarnessError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["case", "added", "planning", "waiting", "total", "success", "steps", "reward", "error"])?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        let rate = self.success_rate();
        let n = self.rows.len().max(1) as f64;
        let steps: usize = self.rows.iter().map(|r| r.steps).sum();
        let reward: f64 = self.rows.iter().map(|r| r.reward).sum();
        for (label, v, s, st, rw) in [
            ("total", self.totals(), self.rows.iter().filter(|r| r.success).count() as f64, steps as f64, reward),
            ("mean", self.means(), rate, steps as f64 / n, reward / n),
        ] {
            w.write_record([
                label.to_string(),
                v[0].to_string(),
                v[1].to_string(),
                v[2].to_string(),
                v[3].to_string(),
                s.to_string(),
                st.to_string(),
                rw.to_string(),
                String::new(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "policy {}", self.policy)?;
        writeln!(
            f,
            "{:<10} {:>9} {:>9} {:>9} {:>9} {:>8}",
            "case", "added", "planning", "waiting", "total", "success"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>9.1} {:>9.1} {:>9.1} {:>9.1} {:>8}{}",
                r.case,
                r.added,
                r.planning,
                r.waiting,
                r.total,
                u8::from(r.success),
                if r.error.is_empty() { String::new() } else { format!("  ({})", r.error) }
            )?;
        }
        let t = self.totals();
        let m = self.means();
        writeln!(
            f,
            "{:<10} {:>9.1} {:>9.1} {:>9.1} {:>9.1} {:>8}",
            "total",
            t[0],
            t[1],
            t[2],
            t[3],
            self.rows.iter().filter(|r| r.success).count()
        )?;
        write!(
            f,
            "{:<10} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>8.2}",
            "mean",
            m[0],
            m[1],
            m[2],
            m[3],
            self.success_rate()
        )
    }
}

/// Runs every case with a fresh controller. Cases are independent and run in
/// parallel; case `i` draws from a generator seeded with `seed + i`. A case
/// that errors is recorded as a failure.
pub fn run_suite(
    policy: &PolicyKind,
    suite: &[Scenario],
    names: &[String],
    base: &EnvConfig,
    seed: u64,
) -> Result<SuiteReport, HarnessError> {
    if suite.is_empty() {
        return Err(HarnessError::Generation("empty suite".into()));
    }
    let config = policy.env_config(base);
    if let PolicyKind::Learned(cp) = policy {
        for s in suite {
            let dim = Observation::dim(s.agents.len(), config.lookahead);
            if s.agents.len() != cp.model.agents || dim != cp.model.obs_dim {
                return Err(HarnessError::CheckpointMismatch {
                    expected: cp.model.agents,
                    obs_dim: cp.model.obs_dim,
                    agents: s.agents.len(),
                    got: dim,
                });
            }
        }
    }
    let results: Vec<(CaseRow, Option<EpisodeTrace>)> = suite
        .par_iter()
        .enumerate()
        .map(|(i, scenario)| {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("case_{i:02}"));
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut controller = policy.controller();
            let outcome = Environment::new(scenario.clone(), config.clone())
                .and_then(|mut env| run_episode(&mut env, controller.as_mut(), &mut rng));
            match outcome {
                Ok(r) => (CaseRow::from_result(name, &r), Some(r.trace)),
                Err(e) => (CaseRow::failed(name, e.to_string()), None),
            }
        })
        .collect();
    let (rows, traces) = results.into_iter().unzip();
    Ok(SuiteReport {
        policy: policy.name().to_string(),
        rows,
        traces,
    })
}

/// Parameters of the generated airport-style maps and the cases on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteParams {
    pub height: usize,
    pub width: usize,
    /// Width of the free lanes between buildings.
    pub lane: usize,
    /// Buildings per row and per column of the layout.
    pub blocks: (usize, usize),
    pub agents: usize,
    pub footprint: String,
    pub safety_distance: f64,
    pub step_limit: usize,
    pub cases: usize,
    pub conflict_rate: f64,
    /// Guidance length bounds for every agent.
    pub min_length: f64,
    pub max_length: f64,
    pub max_attempts: usize,
    pub roadmap: Roadmap,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            height: 40,
            width: 60,
            lane: 9,
            blocks: (2, 3),
            agents: 2,
            footprint: "aircraft".into(),
            safety_distance: 0.5,
            step_limit: DEFAULT_STEP_LIMIT,
            cases: 10,
            conflict_rate: 0.9,
            min_length: 12.0,
            max_length: 30.0,
            max_attempts: 20_000,
            roadmap: Roadmap::default(),
        }
    }
}

/// Lanes around a regular layout of rectangular buildings, with a few random
/// notches cut from the building edges so maps differ between seeds.
pub fn airport_map(params: &SuiteParams, rng: &mut impl Rng) -> Result<GridMap, HarnessError> {
    let (h, w, lane) = (params.height, params.width, params.lane);
    let (br, bc) = params.blocks;
    if br * lane + lane >= h || bc * lane + lane >= w {
        return Err(HarnessError::Generation(format!(
            "{br}x{bc} buildings with {lane}-cell lanes do not fit in {h}x{w}"
        )));
    }
    let block_h = (h - lane * (br + 1)) / br;
    let block_w = (w - lane * (bc + 1)) / bc;
    let extra_r = h - lane * (br + 1) - block_h * br;
    let extra_c = w - lane * (bc + 1) - block_w * bc;
    let mut obstacles = Vec::new();
    for i in 0..br {
        for j in 0..bc {
            let r0 = lane + i * (block_h + lane) + extra_r / 2;
            let c0 = lane + j * (block_w + lane) + extra_c / 2;
            // Knock a random notch out of one corner.
            let notch = (rng.random_range(0..=block_h / 3), rng.random_range(0..=block_w / 3));
            let corner = rng.random_range(0..4);
            for r in 0..block_h {
                for c in 0..block_w {
                    let rr = if corner / 2 == 0 { r } else { block_h - 1 - r };
                    let cc = if corner % 2 == 0 { c } else { block_w - 1 - c };
                    if rr < notch.0 && cc < notch.1 {
                        continue;
                    }
                    obstacles.push(Cell::new((r0 + r) as i32, (c0 + c) as i32));
                }
            }
        }
    }
    Ok(GridMap::from_obstacles(h, w, obstacles)?)
}

/// First timestep at which two agents following their guidance paths in
/// lockstep come within the safety distance, holding at their goals.
pub fn naive_conflict(
    models: &[&PolygonModel],
    paths: &[Vec<Cell>],
    safety_distance: f64,
) -> Option<usize> {
    let horizon = paths.iter().map(Vec::len).max().unwrap_or(0);
    for t in 0..horizon {
        let outlines: Vec<_> = paths
            .iter()
            .zip(models)
            .map(|(p, m)| m.at_cell(p[t.min(p.len() - 1)]))
            .collect();
        for i in 0..outlines.len() {
            for j in i + 1..outlines.len() {
                if polygons_collide(&outlines[i], &outlines[j], safety_distance) {
                    return Some(t);
                }
            }
        }
    }
    None
}

#[derive(Debug, Clone)]
pub struct GeneratedCase {
    pub name: String,
    pub scenario: Scenario,
    pub conflict_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GeneratedSuite {
    pub map: Arc<GridMap>,
    pub cases: Vec<GeneratedCase>,
    pub target_conflicted: usize,
}

impl GeneratedSuite {
    pub fn conflicted(&self) -> usize {
        self.cases.iter().filter(|c| c.conflict_at.is_some()).count()
    }

    pub fn achieved_rate(&self) -> f64 {
        self.conflicted() as f64 / self.cases.len().max(1) as f64
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        self.cases.iter().map(|c| c.scenario.clone()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.name.clone()).collect()
    }

    /// Writes the map, one scenario file per case and a `suite.csv` manifest.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SUITE_MAP), self.map.to_string())?;
        let mut manifest = csv::Writer::from_path(dir.join(SUITE_MANIFEST))?;
        manifest.write_record(["case", "file", "conflict_at"])?;
        for c in &self.cases {
            let file = format!("{}.scen", c.name);
            fs::write(dir.join(&file), c.scenario.to_string())?;
            manifest.write_record([
                c.name.clone(),
                file,
                c.conflict_at.map(|t| t.to_string()).unwrap_or_default(),
            ])?;
        }
        manifest.flush()?;
        Ok(())
    }
}

pub const SUITE_MAP: &str = "airport.map";
pub const SUITE_MANIFEST: &str = "suite.csv";

fn sample_cell(rng: &mut impl Rng, cells: &[Cell]) -> Cell {
    cells[rng.random_range(0..cells.len())]
}

fn near(rng: &mut impl Rng, cells: &[Cell], around: Cell, radius: i32) -> Option<Cell> {
    let close: Vec<Cell> = cells
        .iter()
        .copied()
        .filter(|c| (c.row - around.row).abs() <= radius && (c.col - around.col).abs() <= radius)
        .collect();
    (!close.is_empty()).then(|| sample_cell(rng, &close))
}

/// Generates `params.cases` scenarios of which `round(conflict_rate × cases)`
/// conflict under lockstep traversal of their guidance paths. Gives up
/// after `max_attempts` draws and returns whatever mix it reached, so check
/// [`GeneratedSuite::conflicted`] against `target_conflicted`.
pub fn generate_suite(seed: u64, params: &SuiteParams) -> Result<GeneratedSuite, HarnessError> {
    if !(0.0..=1.0).contains(&params.conflict_rate) {
        return Err(HarnessError::Generation(format!(
            "conflict rate {} outside [0, 1]",
            params.conflict_rate
        )));
    }
    if params.agents == 0 || params.cases == 0 {
        return Err(HarnessError::Generation("need at least one agent and one case".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let library = FootprintLibrary::builtin();
    let model = library
        .get(&params.footprint)
        .map_err(|e| HarnessError::Generation(e.to_string()))?
        .clone();
    let map = Arc::new(airport_map(params, &mut rng)?);
    let stamp = Arc::new(FootprintStamp::new(
        model.clone(),
        params.safety_distance,
        params.roadmap.connectivity,
    ));
    let valid: Vec<Cell> = map
        .free_cells()
        .filter(|&c| !stamp.static_collision(c, &map))
        .collect();
    if valid.len() < 2 * params.agents {
        return Err(HarnessError::Generation("map leaves too few valid placements".into()));
    }
    let target = (params.conflict_rate * params.cases as f64).round() as usize;
    let mut conflicted = Vec::new();
    let mut clear = Vec::new();
    let d = params.safety_distance;
    let plan = |start: Cell, goal: Cell, blockers: &[Cell]| {
        let dynamic: Vec<Cell> = blockers.iter().flat_map(|&b| stamp.covered(b)).collect();
        dstar::plan(
            ObstacleSnapshot::new(map.clone(), dynamic, stamp.covered(start).collect::<Vec<_>>()),
            stamp.clone(),
            params.roadmap,
            start,
            goal,
        )
        .ok()
    };
    for _ in 0..params.max_attempts {
        if conflicted.len() >= target && clear.len() >= params.cases - target {
            break;
        }
        // The first agent is placed freely; half of the time the others are
        // placed against its route to provoke conflicts.
        let head_on = rng.random_bool(0.5);
        let mut ends: Vec<(Cell, Cell)> = vec![(sample_cell(&mut rng, &valid), sample_cell(&mut rng, &valid))];
        let Some(first) = plan(ends[0].0, ends[0].1, &[]) else {
            continue;
        };
        let mut ok = true;
        for _ in 1..params.agents {
            let pair = if head_on {
                let n = first.waypoints.len();
                let late = first.waypoints[rng.random_range(n / 2..n)];
                let early = first.waypoints[rng.random_range(0..n.div_ceil(2))];
                near(&mut rng, &valid, late, 3).zip(near(&mut rng, &valid, early, 3))
            } else {
                Some((sample_cell(&mut rng, &valid), sample_cell(&mut rng, &valid)))
            };
            match pair {
                Some(p) => ends.push(p),
                None => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let placed = |c: Cell| model.at_cell(c);
        let separated = |cells: Vec<Cell>| {
            (0..cells.len()).all(|i| {
                (i + 1..cells.len()).all(|j| !polygons_collide(&placed(cells[i]), &placed(cells[j]), d))
            })
        };
        if !separated(ends.iter().map(|e| e.0).collect()) || !separated(ends.iter().map(|e| e.1).collect()) {
            continue;
        }
        // Every agent must still reach its goal within the length bound with
        // the others parked at theirs.
        let mut paths = Vec::new();
        for (i, &(s, g)) in ends.iter().enumerate() {
            let parked: Vec<Cell> = ends
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, e)| e.1)
                .collect();
            if !plan(s, g, &parked).is_some_and(|p| p.total_length <= params.max_length) {
                ok = false;
                break;
            }
            match plan(s, g, &[]) {
                Some(p) if p.total_length >= params.min_length && p.total_length <= params.max_length => {
                    paths.push(p.waypoints)
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let models: Vec<&PolygonModel> = vec![&model; params.agents];
        let conflict = naive_conflict(&models, &paths, d);
        let bucket = if conflict.is_some() { &mut conflicted } else { &mut clear };
        let quota = if conflict.is_some() { target } else { params.cases - target };
        if bucket.len() >= quota {
            continue;
        }
        let agents = ends
            .iter()
            .enumerate()
            .map(|(i, &(start, goal))| AgentSpec {
                id: format!("a{i}"),
                footprint: params.footprint.clone(),
                model: model.clone(),
                start,
                goal,
            })
            .collect();
        let mut scenario = Scenario::new(map.clone(), agents, d, params.step_limit)?;
        scenario.map_file = Some(SUITE_MAP.to_string());
        bucket.push((scenario, conflict));
    }
    // Interleave so the conflict-free cases are spread through the suite.
    let mut cases = Vec::new();
    let total = conflicted.len() + clear.len();
    let (mut ci, mut fi) = (conflicted.into_iter(), clear.into_iter());
    let mut free_left = fi.len();
    for k in 0..total {
        let take_clear = free_left > 0 && (k + 1) * free_left >= total - k || ci.len() == 0;
        let (scenario, conflict_at) = if take_clear {
            free_left -= 1;
            fi.next().expect("counted")
        } else {
            ci.next().expect("counted")
        };
        cases.push(GeneratedCase {
            name: format!("case_{k:02}"),
            scenario,
            conflict_at,
        });
    }
    Ok(GeneratedSuite {
        map,
        cases,
        target_conflicted: target,
    })
}

/// Reads a suite written by [`GeneratedSuite::write`], or any directory of
/// `.scen` files next to the maps they name.
pub fn load_suite(dir: &Path) -> Result<(Vec<String>, Vec<Scenario>), HarnessError> {
    let manifest = dir.join(SUITE_MANIFEST);
    let files: Vec<(String, PathBuf)> = if manifest.exists() {
        let mut r = csv::Reader::from_path(&manifest)?;
        r.records()
            .map(|rec| {
                let rec = rec?;
                Ok((rec[0].to_string(), dir.join(&rec[1])))
            })
            .collect::<Result<_, HarnessError>>()?
    } else {
        let mut v: Vec<(String, PathBuf)> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "scen"))
            .map(|p| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p))
            .collect();
        v.sort();
        v
    };
    let mut names = Vec::new();
    let mut scenarios = Vec::new();
    for (name, path) in files {
        scenarios.push(load_scenario(&path)?);
        names.push(name);
    }
    if scenarios.is_empty() {
        return Err(HarnessError::File {
            path: dir.to_path_buf(),
            message: "no scenarios found".into(),
        });
    }
    Ok((names, scenarios))
}

/// Loads a scenario file together with the map and footprint files it names,
/// resolved relative to the scenario's directory.
pub fn load_scenario(path: &Path) -> Result<Scenario, HarnessError> {
    let text = fs::read_to_string(path)?;
    let header = crate::scenario::ScenarioHeader::parse(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let map_file = header.map_file.ok_or_else(|| HarnessError::File {
        path: path.to_path_buf(),
        message: "scenario does not name a map".into(),
    })?;
    let map = Arc::new(GridMap::parse(&fs::read_to_string(base.join(&map_file))?)?);
    let library = match &header.footprint_file {
        Some(f) => {
            let mut lib = FootprintLibrary::builtin();
            let extra = FootprintLibrary::parse(&fs::read_to_string(base.join(f))?).map_err(|e| {
                HarnessError::File {
                    path: base.join(f),
                    message: e.to_string(),
                }
            })?;
            for name in extra.names().map(str::to_string).collect::<Vec<_>>() {
                let model = extra.get(&name).expect("listed").clone();
                lib.insert(name, model);
            }
            lib
        }
        None => FootprintLibrary::builtin(),
    };
    Ok(Scenario::parse(&text, map, &library)?)
}

/// Environment and training settings read from one TOML file with optional
/// `[env]`, `[train]` and `[suite]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub suite: SuiteParams,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// The learning variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Rules, heuristic Replan and a shared critic.
    Mappohr,
    /// Heuristic Replan, no rules.
    Mappoh,
    /// Neither rules nor heuristic Replan.
    Mappo,
    /// Rules and heuristics with a critic that sees only its own agent.
    Ppohr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mappohr, Variant::Mappoh, Variant::Mappo, Variant::Ppohr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mappohr => "MAPPOHR",
            Variant::Mappoh => "MAPPOH",
            Variant::Mappo => "MAPPO",
            Variant::Ppohr => "PPOHR",
        }
    }

    pub fn apply(self, env: &mut EnvConfig, train: &mut TrainConfig) {
        let (rules, heuristics, share) = match self {
            Variant::Mappohr => (true, true, true),
            Variant::Mappoh => (false, true, true),
            Variant::Mappo => (false, false, true),
            Variant::Ppohr => (true, true, false),
        };
        let penalty = env.rules.penalty;
        env.rules = if rules { RuleConfig::on() } else { RuleConfig::off() };
        env.rules.penalty = penalty;
        env.heuristics = heuristics;
        train.share_critic = share;
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant `{s}` (expected MAPPOHR, MAPPOH, MAPPO or PPOHR)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dstar::Timing;

    fn corridor() -> Scenario {
        let map = Arc::new(GridMap::parse("type octile\nheight 5\nwidth 8\nmap\n........\n........\n@@@@@@@@\n........\n........\n").unwrap());
        Scenario::parse("a unit 0 0 0 7\nb unit 4 0 4 7\n", map, &FootprintLibrary::builtin()).unwrap()
    }

    fn det() -> EnvConfig {
        EnvConfig {
            timing: Timing::deterministic(),
            ..EnvConfig::default()
        }
    }

    #[test]
    fn conflict_free_case_costs_nothing() {
        for policy in [PolicyKind::PureReplanner, PolicyKind::RuleOnly] {
            let report = run_suite(&policy, &[corridor()], &[], &det(), 0).unwrap();
            let r = &report.rows[0];
            assert_eq!((r.added, r.planning, r.waiting, r.total), (0.0, 0.0, 0.0, 0.0));
            assert!(r.success);
            assert_eq!(report.success_rate(), 1.0);
        }
    }

    #[test]
    fn report_aggregates_are_column_sums() {
        let report = SuiteReport {
            policy: "x".into(),
            rows: vec![
                CaseRow { added: 1.0, planning: 2.0, waiting: 3.0, total: 6.0, success: true, ..CaseRow::failed("a".into(), String::new()) },
                CaseRow { added: 2.0, planning: 0.5, waiting: 0.0, total: 2.5, ..CaseRow::failed("b".into(), String::new()) },
            ],
            traces: vec![None, None],
        };
        assert_eq!(report.totals(), [3.0, 2.5, 3.0, 8.5]);
        assert_eq!(report.means(), [1.5, 1.25, 1.5, 4.25]);
        assert_eq!(report.success_rate(), 0.5);
        let csv = report.to_csv_string();
        assert!(csv.lines().nth(3).unwrap().starts_with("total,3,2.5,3,8.5,1,"));
    }

    #[test]
    fn variants_set_flags() {
        let (mut env, mut train) = (EnvConfig::default(), TrainConfig::default());
        Variant::Mappo.apply(&mut env, &mut train);
        assert_eq!(env.rules, RuleConfig::off());
        assert!(!env.heuristics);
        Variant::Ppohr.apply(&mut env, &mut train);
        assert_eq!(env.rules, RuleConfig::on());
        assert!(!train.share_critic);
        assert_eq!("mappoh".parse::<Variant>().unwrap(), Variant::Mappoh);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.total_steps = 123;
        cfg.env.rules.penalty = -2.0;
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_toml("[train]\nlr = 0.001\n").unwrap();
        assert_eq!(partial.train.lr, 0.001);
        assert_eq!(partial.train.gamma, 0.99);
    }
}
