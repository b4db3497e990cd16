use std::path::PathBuf;
use std::sync::Arc;

use mappohr::collision::polygons_collide;
use mappohr::dstar::{self, ObstacleSnapshot, Timing};
use mappohr::env::{EnvConfig, Environment, EpisodeMetrics, Observation, StepOutcome};
use mappohr::harness::{self, ExperimentConfig, PolicyKind, SuiteParams};
use mappohr::mappo::{Checkpoint, LearnedController};
use mappohr::{
    Action, Cell, ConvexPolygon, FootprintLibrary, FootprintStamp, GridMap, Point, PolygonModel,
    Roadmap, RuleConfig, Scenario,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cell(c: (i32, i32)) -> Cell {
    Cell::new(c.0, c.1)
}

fn points(vertices: Vec<(f64, f64)>) -> Vec<Point> {
    vertices.into_iter().map(|(x, y)| Point::new(x, y)).collect()
}

#[pyclass(name = "GridMap", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGridMap(Arc<GridMap>);

#[pymethods]
impl PyGridMap {
    /// Parses a map in the `type/height/width/map` text format.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self(Arc::new(GridMap::parse(text).map_err(value_err)?)))
    }

    #[staticmethod]
    fn empty(height: usize, width: usize) -> Self {
        Self(Arc::new(GridMap::empty(height, width)))
    }

    #[staticmethod]
    fn from_obstacles(height: usize, width: usize, obstacles: Vec<(i32, i32)>) -> PyResult<Self> {
        let cells = obstacles.into_iter().map(cell).collect::<Vec<_>>();
        Ok(Self(Arc::new(GridMap::from_obstacles(height, width, cells).map_err(value_err)?)))
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn is_blocked(&self, row: i32, col: i32) -> bool {
        self.0.is_blocked(Cell::new(row, col))
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }
}

#[pyclass(name = "Footprint", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFootprint(PolygonModel);

#[pymethods]
impl PyFootprint {
    /// Convex polygon given as `(x, y)` vertices around the agent's cell centre.
    #[new]
    fn new(vertices: Vec<(f64, f64)>) -> PyResult<Self> {
        Ok(Self(PolygonModel::new(points(vertices)).map_err(value_err)?))
    }

    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        Ok(Self(FootprintLibrary::builtin().get(name).map_err(value_err)?.clone()))
    }

    fn vertices(&self) -> Vec<(f64, f64)> {
        self.0.vertices().iter().map(|p| (p.x, p.y)).collect()
    }

    /// `(row, col)` offsets of the cells the footprint overlaps.
    fn covered_offsets(&self) -> Vec<(i32, i32)> {
        self.0.covered_offsets()
    }
}

/// Minimum distance between two convex polygons (0 when they overlap).
#[pyfunction]
fn polygon_distance(a: Vec<(f64, f64)>, b: Vec<(f64, f64)>) -> f64 {
    ConvexPolygon::from_ccw(points(a)).distance(&ConvexPolygon::from_ccw(points(b)))
}

/// Whether two convex polygons overlap or come closer than `d`.
#[pyfunction]
fn collide(a: Vec<(f64, f64)>, b: Vec<(f64, f64)>, d: f64) -> bool {
    polygons_collide(&ConvexPolygon::from_ccw(points(a)), &ConvexPolygon::from_ccw(points(b)), d)
}

/// Shortest footprint-aware path; returns `(waypoints, length)`.
#[pyfunction]
#[pyo3(signature = (map, footprint, start, goal, safety_distance=0.0))]
fn plan(
    map: &PyGridMap,
    footprint: &PyFootprint,
    start: (i32, i32),
    goal: (i32, i32),
    safety_distance: f64,
) -> PyResult<(Vec<(i32, i32)>, f64)> {
    let roadmap = Roadmap::default();
    let stamp = Arc::new(FootprintStamp::new(footprint.0.clone(), safety_distance, roadmap.connectivity));
    let path = dstar::plan(
        ObstacleSnapshot::static_only(map.0.clone()),
        stamp,
        roadmap,
        cell(start),
        cell(goal),
    )
    .map_err(value_err)?;
    Ok((path.waypoints.iter().map(|c| (c.row, c.col)).collect(), path.total_length))
}

#[pyclass(name = "Scenario", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyScenario(Scenario);

#[pymethods]
impl PyScenario {
    /// Loads a scenario file and the map it names.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(harness::load_scenario(&path).map_err(value_err)?))
    }

    #[staticmethod]
    fn parse(text: &str, map: &PyGridMap) -> PyResult<Self> {
        Ok(Self(Scenario::parse(text, map.0.clone(), &FootprintLibrary::builtin()).map_err(value_err)?))
    }

    #[getter]
    fn num_agents(&self) -> usize {
        self.0.agents.len()
    }

    #[getter]
    fn map(&self) -> PyGridMap {
        PyGridMap(self.0.map.clone())
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &EpisodeMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("added", m.added)?;
    d.set_item("planning", m.planning)?;
    d.set_item("waiting", m.waiting)?;
    d.set_item("total", m.total)?;
    d.set_item("success", m.success)?;
    d.set_item("steps", m.steps)?;
    Ok(d)
}

fn features(obs: &[Observation]) -> Vec<Vec<f64>> {
    obs.iter().map(Observation::features).collect()
}

fn config_from(toml: Option<&str>, rules: Option<bool>, deterministic: bool) -> PyResult<EnvConfig> {
    let mut cfg = match toml {
        Some(t) => ExperimentConfig::from_toml(t).map_err(value_err)?.env,
        None => EnvConfig::default(),
    };
    if let Some(on) = rules {
        cfg.rules = if on { RuleConfig::on() } else { RuleConfig::off() };
    }
    if deterministic {
        cfg.timing = Timing::deterministic();
    }
    Ok(cfg)
}

#[pyclass(name = "Environment", unsendable)]
struct PyEnvironment(Environment);

#[pymethods]
impl PyEnvironment {
    /// `config` is TOML text with an optional `[env]` table.
    #[new]
    #[pyo3(signature = (scenario, config=None, rules=None, deterministic_timing=true))]
    fn new(
        scenario: &PyScenario,
        config: Option<&str>,
        rules: Option<bool>,
        deterministic_timing: bool,
    ) -> PyResult<Self> {
        let cfg = config_from(config, rules, deterministic_timing)?;
        Ok(Self(Environment::new(scenario.0.clone(), cfg).map_err(value_err)?))
    }

    #[getter]
    fn observation_dim(&self) -> usize {
        self.0.observation_dim()
    }

    #[getter]
    fn num_agents(&self) -> usize {
        self.0.num_agents()
    }

    /// Per-agent feature vectors.
    fn reset(&mut self) -> Vec<Vec<f64>> {
        features(&self.0.reset())
    }

    /// Allowed action names per agent.
    fn masks(&self) -> Vec<Vec<&'static str>> {
        self.0
            .masks()
            .iter()
            .map(|m| m.actions().map(Action::name).collect())
            .collect()
    }

    /// Takes action names (`move`, `wait`, `back`, `replan`) or indices.
    fn step<'py>(&mut self, py: Python<'py>, actions: Vec<Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyDict>> {
        let parsed = actions
            .iter()
            .map(|a| {
                if let Ok(i) = a.extract::<usize>() {
                    Action::from_index(i).ok_or_else(|| value_err(format!("no action with index {i}")))
                } else {
                    a.extract::<String>()?.parse::<Action>().map_err(value_err)
                }
            })
            .collect::<PyResult<Vec<_>>>()?;
        let out: StepOutcome = self.0.step(&parsed).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("observations", features(&out.observations))?;
        d.set_item("rewards", out.rewards)?;
        d.set_item("shared_reward", out.shared_reward)?;
        d.set_item("terminated", out.terminated)?;
        d.set_item("truncated", out.truncated)?;
        d.set_item(
            "cells",
            out.agents.iter().map(|a| (a.cell.row, a.cell.col)).collect::<Vec<_>>(),
        )?;
        Ok(d)
    }

    fn is_finished(&self) -> bool {
        self.0.is_finished()
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        metrics_dict(py, &self.0.metrics())
    }

    /// The episode trace in its text format.
    fn trace(&self) -> String {
        self.0.trace().to_string()
    }
}

#[pyclass(name = "Policy", unsendable)]
struct PyPolicy {
    kind: PolicyKind,
}

#[pymethods]
impl PyPolicy {
    /// A trained checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let cp = Checkpoint::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self {
            kind: PolicyKind::Learned(Box::new(cp)),
        })
    }

    #[staticmethod]
    fn replanner() -> Self {
        Self {
            kind: PolicyKind::PureReplanner,
        }
    }

    #[staticmethod]
    fn rules() -> Self {
        Self {
            kind: PolicyKind::RuleOnly,
        }
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Runs one episode; returns its metrics and trace text.
    #[pyo3(signature = (scenario, seed=0))]
    fn run<'py>(&self, py: Python<'py>, scenario: &PyScenario, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let base = EnvConfig {
            timing: Timing::deterministic(),
            ..EnvConfig::default()
        };
        let mut env = Environment::new(scenario.0.clone(), self.kind.env_config(&base)).map_err(value_err)?;
        let mut controller = self.kind.controller();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let result = harness::run_episode(&mut env, controller.as_mut(), &mut rng).map_err(value_err)?;
        let d = metrics_dict(py, &result.metrics)?;
        d.set_item("reward", result.total_reward)?;
        d.set_item("trace", result.trace.to_string())?;
        Ok(d)
    }

    /// Action probabilities of the learned actor for the given features.
    fn probabilities(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let PolicyKind::Learned(cp) = &self.kind else {
            return Err(value_err("only learned policies have action probabilities"));
        };
        let controller = LearnedController::new(cp.model.clone(), true);
        let hidden = controller.model.actor.initial_hidden(features.len());
        let masks = vec![mappohr::ActionMask::ALL; features.len()];
        Ok(controller.model.actor_forward(&features, &masks, &hidden).0)
    }
}

/// Generates a conflict suite into `out`; returns the achieved conflict rate.
#[pyfunction]
#[pyo3(signature = (out, seed=0, cases=10, conflict_rate=0.9))]
fn generate_suite(out: PathBuf, seed: u64, cases: usize, conflict_rate: f64) -> PyResult<f64> {
    let params = SuiteParams {
        cases,
        conflict_rate,
        ..SuiteParams::default()
    };
    let suite = harness::generate_suite(seed, &params).map_err(value_err)?;
    suite.write(&out).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(suite.achieved_rate())
}

#[pymodule]
#[pyo3(name = "mappohr")]
fn mappohr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGridMap>()?;
    m.add_class::<PyFootprint>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyEnvironment>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(polygon_distance, m)?)?;
    m.add_function(wrap_pyfunction!(collide, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(generate_suite, m)?)?;
    m.add("OBSERVATION_DIM", Observation::dim(2, mappohr::env::DEFAULT_LOOKAHEAD))?;
    Ok(())
}
