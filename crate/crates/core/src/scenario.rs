//! Multi-agent scenarios: who starts where, with which footprint, heading to
//! which goal.
//!
//! File format, one directive or agent per line (`#` comments allowed):
//!
//! ```text
//! map airport.map
//! footprints footprints.txt
//! safety_distance 0.5
//! step_limit 60
//! # id footprint start_row start_col goal_row goal_col
//! a0 aircraft 10 5 10 40
//! a1 aircraft 3 20 30 20
//! ```
//!
//! `map` and `footprints` are only read by file-based loaders; in-memory parsing
//! takes the map and library as arguments.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::collision::{check_static_collision, FootprintError, FootprintLibrary, Placement, PolygonModel};
use crate::grid::{Cell, GridMap};

pub const DEFAULT_STEP_LIMIT: usize = 60;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate agent id `{0}`")]
    DuplicateId(String),
    #[error(transparent)]
    Footprint(#[from] FootprintError),
    #[error("agent `{agent}` {which} placement at {cell} collides with obstacles at {offending:?}")]
    Placement {
        agent: String,
        which: &'static str,
        cell: Cell,
        offending: Vec<Cell>,
    },
    #[error("safety distance must be finite and non-negative, got {0}")]
    SafetyDistance(f64),
    #[error("scenario has no agents")]
    NoAgents,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub id: String,
    pub footprint: String,
    pub model: PolygonModel,
    pub start: Cell,
    pub goal: Cell,
}

/// A validated scenario. Immutable; clone freely (the map is shared).
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub map: Arc<GridMap>,
    pub agents: Vec<AgentSpec>,
    pub safety_distance: f64,
    pub step_limit: usize,
    /// Optional file references carried through for serialization.
    pub map_file: Option<String>,
    pub footprint_file: Option<String>,
}

impl Scenario {
    pub fn new(
        map: Arc<GridMap>,
        agents: Vec<AgentSpec>,
        safety_distance: f64,
        step_limit: usize,
    ) -> Result<Self, ScenarioError> {
        if !(safety_distance.is_finite() && safety_distance >= 0.0) {
            return Err(ScenarioError::SafetyDistance(safety_distance));
        }
        if agents.is_empty() {
            return Err(ScenarioError::NoAgents);
        }
        let mut seen = BTreeSet::new();
        for a in &agents {
            if !seen.insert(a.id.as_str()) {
                return Err(ScenarioError::DuplicateId(a.id.clone()));
            }
            for (which, cell) in [("start", a.start), ("goal", a.goal)] {
                validate_placement(&map, &a.model, cell, safety_distance).map_err(|offending| {
                    ScenarioError::Placement {
                        agent: a.id.clone(),
                        which,
                        cell,
                        offending,
                    }
                })?;
            }
        }
        Ok(Self {
            map,
            agents,
            safety_distance,
            step_limit,
            map_file: None,
            footprint_file: None,
        })
    }

    /// Parses scenario text against an already loaded map and footprint library.
    pub fn parse(
        text: &str,
        map: Arc<GridMap>,
        library: &FootprintLibrary,
    ) -> Result<Self, ScenarioError> {
        let header = ScenarioHeader::parse(text)?;
        let mut agents = Vec::new();
        for (line, tokens) in header.agent_lines {
            let syntax = |message: String| ScenarioError::Syntax { line, message };
            let coord = |s: &str| {
                s.parse::<i32>()
                    .map_err(|_| syntax(format!("bad coordinate `{s}`")))
            };
            let model = library.get(&tokens[1])?.clone();
            agents.push(AgentSpec {
                id: tokens[0].clone(),
                footprint: tokens[1].clone(),
                model,
                start: Cell::new(coord(&tokens[2])?, coord(&tokens[3])?),
                goal: Cell::new(coord(&tokens[4])?, coord(&tokens[5])?),
            });
        }
        let mut scenario = Self::new(map, agents, header.safety_distance, header.step_limit)?;
        scenario.map_file = header.map_file;
        scenario.footprint_file = header.footprint_file;
        Ok(scenario)
    }
}

/// Returns the offending obstacle cells when the placement is not clear.
fn validate_placement(
    map: &GridMap,
    model: &PolygonModel,
    cell: Cell,
    d: f64,
) -> Result<(), Vec<Cell>> {
    let placement = Placement::new(model, cell);
    if !check_static_collision(&placement, map, d) {
        return Ok(());
    }
    let offending = crate::collision::DetectionModel::new(model.clone(), d)
        .covered_offsets()
        .into_iter()
        .map(|(dr, dc)| cell.offset(dr, dc))
        .filter(|&c| map.is_blocked(c))
        .collect();
    Err(offending)
}

/// Directive lines of a scenario file, before agents are resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioHeader {
    pub map_file: Option<String>,
    pub footprint_file: Option<String>,
    pub safety_distance: f64,
    pub step_limit: usize,
    agent_lines: Vec<(usize, Vec<String>)>,
}

impl ScenarioHeader {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut header = Self {
            map_file: None,
            footprint_file: None,
            safety_distance: 0.0,
            step_limit: DEFAULT_STEP_LIMIT,
            agent_lines: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or_default().trim();
            if content.is_empty() {
                continue;
            }
            let tokens: Vec<String> = content.split_whitespace().map(str::to_string).collect();
            let syntax = |message: String| ScenarioError::Syntax { line, message };
            match (tokens[0].as_str(), tokens.len()) {
                ("map", 2) => header.map_file = Some(tokens[1].clone()),
                ("footprints", 2) => header.footprint_file = Some(tokens[1].clone()),
                ("safety_distance", 2) => {
                    header.safety_distance = tokens[1]
                        .parse()
                        .map_err(|_| syntax(format!("bad safety distance `{}`", tokens[1])))?
                }
                ("step_limit", 2) => {
                    header.step_limit = tokens[1]
                        .parse()
                        .map_err(|_| syntax(format!("bad step limit `{}`", tokens[1])))?
                }
                (_, 6) => header.agent_lines.push((line, tokens)),
                _ => {
                    return Err(syntax(format!(
                        "expected a directive or `id footprint start_row start_col goal_row goal_col`, got `{content}`"
                    )))
                }
            }
        }
        Ok(header)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(m) = &self.map_file {
            writeln!(f, "map {m}")?;
        }
        if let Some(fp) = &self.footprint_file {
            writeln!(f, "footprints {fp}")?;
        }
        writeln!(f, "safety_distance {}", self.safety_distance)?;
        writeln!(f, "step_limit {}", self.step_limit)?;
        writeln!(f, "# id footprint start_row start_col goal_row goal_col")?;
        for a in &self.agents {
            writeln!(
                f,
                "{} {} {} {} {} {}",
                a.id, a.footprint, a.start.row, a.start.col, a.goal.row, a.goal.col
            )?;
        }
        Ok(())
    }
}
