//! Multi-robot grid path finding that pairs a footprint-aware D* Lite
//! guidance planner with a rule-guided, parameter-shared recurrent MAPPO
//! real-time planner.
//!
//! Module map:
//!
//! - [`grid`] and [`scenario`]: maps, roadmap connectivity, scenario files.
//! - [`geometry`] and [`collision`]: convex footprints, covered cells and
//!   safety-distance collision checks.
//! - [`dstar`]: incremental guidance planning.
//! - [`env`]: the joint-step multi-agent environment and its observations.
//! - [`rules`]: action masks and reward shaping from domain rules.
//! - [`nn`], [`mappo`]: networks, rollouts, GAE and PPO updates.
//! - [`harness`]: metrics, baselines, suites and reports.

pub mod collision;
pub mod dstar;
pub mod env;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod mappo;
pub mod nn;
pub mod rules;
pub mod scenario;

pub use collision::{
    check_collision, check_static_collision, covered_cells, DetectionModel, FootprintLibrary,
    FootprintStamp, Placement, PolygonModel,
};
pub use dstar::{cost, path_length, DStarLite, GuidancePath, ObstacleSnapshot, PlanError, Timing};
pub use env::{EnvConfig, Environment, EpisodeMetrics, EpisodeTrace, Observation};
pub use geometry::{min_segment_distance, ConvexPolygon, Point, Segment};
pub use grid::{Cell, Connectivity, GridMap, Metric, Roadmap};
pub use rules::{Action, ActionMask, RuleConfig};
pub use scenario::{AgentSpec, Scenario};
