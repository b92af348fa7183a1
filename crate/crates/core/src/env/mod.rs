//! Sparse-reward environments and the landmark ("node") definitions used by
//! the scripted annotator.

pub mod grid;
pub mod line;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Action, Head};

pub use grid::{GridLayout, GridState, Move};
pub use line::{LineConfig, LineState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvConfig {
    Grid {
        /// ASCII map file; the bundled Key-Door-Treasure map when absent.
        #[serde(default)]
        map: Option<PathBuf>,
        #[serde(default = "default_grid_steps")]
        max_steps: usize,
    },
    Line(LineConfig),
}

fn default_grid_steps() -> usize {
    240
}

impl EnvConfig {
    pub fn grid() -> Self {
        EnvConfig::Grid {
            map: None,
            max_steps: default_grid_steps(),
        }
    }

    pub fn line() -> Self {
        EnvConfig::Line(LineConfig::default())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EnvConfig::Grid { .. } => "grid",
            EnvConfig::Line(_) => "line",
        }
    }

    pub fn max_steps(&self) -> usize {
        match self {
            EnvConfig::Grid { max_steps, .. } => *max_steps,
            EnvConfig::Line(c) => c.max_steps,
        }
    }

    pub fn build(&self) -> Result<Env> {
        match self {
            EnvConfig::Grid { map, max_steps } => {
                let layout = match map {
                    Some(path) => GridLayout::parse(&std::fs::read_to_string(path)?)?,
                    None => GridLayout::default_layout(),
                };
                Ok(Env::grid(Arc::new(layout), *max_steps))
            }
            EnvConfig::Line(c) => {
                if !(c.length > 0.0 && c.v_max > 0.0) || c.max_steps == 0 {
                    return Err(Error::config("env", "line length, v_max and max_steps must be positive"));
                }
                Ok(Env::line(c.clone()))
            }
        }
    }
}

/// Environment state recorded after every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Snapshot {
    Grid { x: i32, y: i32, has_key: bool, door_open: bool },
    Line { position: f64, velocity: f64 },
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub snapshot: Snapshot,
    /// Squared norm of the action actually applied.
    pub control_cost: f64,
}

#[derive(Clone, Debug)]
enum EnvState {
    Grid {
        layout: Arc<GridLayout>,
        max_steps: usize,
        state: GridState,
    },
    Line {
        cfg: LineConfig,
        state: LineState,
    },
}

/// A single-owner environment instance.
#[derive(Clone, Debug)]
pub struct Env {
    inner: EnvState,
}

impl Env {
    pub fn grid(layout: Arc<GridLayout>, max_steps: usize) -> Self {
        let state = grid::grid_reset(&layout);
        Self {
            inner: EnvState::Grid {
                layout,
                max_steps,
                state,
            },
        }
    }

    pub fn line(cfg: LineConfig) -> Self {
        let state = line::line_reset(&cfg);
        Self {
            inner: EnvState::Line { cfg, state },
        }
    }

    pub fn obs_dim(&self) -> usize {
        match &self.inner {
            EnvState::Grid { .. } => 4,
            EnvState::Line { .. } => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        match &self.inner {
            EnvState::Grid { .. } => 4,
            EnvState::Line { .. } => 1,
        }
    }

    pub fn policy_head(&self) -> Head {
        match &self.inner {
            EnvState::Grid { .. } => Head::SoftmaxDiscrete,
            EnvState::Line { .. } => Head::TanhGaussianMean,
        }
    }

    pub fn max_steps(&self) -> usize {
        match &self.inner {
            EnvState::Grid { max_steps, .. } => *max_steps,
            EnvState::Line { cfg, .. } => cfg.max_steps,
        }
    }

    pub fn terminal_bonus(&self) -> f64 {
        match &self.inner {
            EnvState::Grid { .. } => grid::TREASURE_REWARD,
            EnvState::Line { .. } => line::LINE_REWARD,
        }
    }

    pub fn layout(&self) -> Option<&Arc<GridLayout>> {
        match &self.inner {
            EnvState::Grid { layout, .. } => Some(layout),
            EnvState::Line { .. } => None,
        }
    }

    /// Resets to the start state. Both environments have a fixed start.
    pub fn reset(&mut self) -> Vec<f64> {
        match &mut self.inner {
            EnvState::Grid { layout, state, .. } => *state = grid::grid_reset(layout),
            EnvState::Line { cfg, state } => *state = line::line_reset(cfg),
        }
        self.obs()
    }

    pub fn obs(&self) -> Vec<f64> {
        match &self.inner {
            EnvState::Grid { layout, state, .. } => grid::grid_obs(state, layout),
            EnvState::Line { cfg, state } => line::line_obs(state, cfg),
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        match &self.inner {
            EnvState::Grid { state, .. } => Snapshot::Grid {
                x: state.x,
                y: state.y,
                has_key: state.has_key,
                door_open: state.door_open,
            },
            EnvState::Line { state, .. } => Snapshot::Line {
                position: state.position,
                velocity: state.velocity,
            },
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        let (reward, done, control_cost) = match (&mut self.inner, action) {
            (
                EnvState::Grid {
                    layout,
                    max_steps,
                    state,
                },
                Action::Discrete(i),
            ) => {
                let mv = Move::from_index(*i).ok_or(Error::ActionOutOfRange {
                    action: *i,
                    n_actions: 4,
                })?;
                let (next, r, done) = grid::grid_step(state, mv, layout, *max_steps);
                *state = next;
                (r, done, 0.0)
            }
            (EnvState::Line { cfg, state }, Action::Continuous(a)) => {
                if a.len() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        got: a.len(),
                    });
                }
                let (next, r, done, applied) = line::line_step(state, a[0], cfg)?;
                *state = next;
                (r, done, applied * applied)
            }
            _ => return Err(Error::ActionKindMismatch),
        };
        Ok(StepOutcome {
            obs: self.obs(),
            reward,
            done,
            snapshot: self.snapshot(),
            control_cost,
        })
    }

    pub fn nodes(&self) -> NodeSpec {
        match &self.inner {
            EnvState::Grid { layout, .. } => NodeSpec::Grid {
                entrance: layout.entrance.unwrap_or(layout.treasure),
            },
            EnvState::Line { cfg, .. } => NodeSpec::line(cfg.length),
        }
    }
}

/// Ordered landmark predicates over a trajectory's visited states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NodeSpec {
    /// Reached key, opened door, entered the treasure room at `entrance`.
    Grid { entrance: (i32, i32) },
    /// Crossed each position threshold.
    Line { thresholds: Vec<f64> },
}

impl NodeSpec {
    pub fn line(length: f64) -> Self {
        NodeSpec::Line {
            thresholds: vec![length / 4.0, length / 2.0, 3.0 * length / 4.0],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NodeSpec::Grid { .. } => 3,
            NodeSpec::Line { thresholds } => thresholds.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn satisfied(&self, node: usize, s: &Snapshot) -> bool {
        match (self, s) {
            (NodeSpec::Grid { entrance }, Snapshot::Grid { x, y, has_key, door_open }) => match node {
                0 => *has_key,
                1 => *door_open,
                _ => (*x, *y) == *entrance,
            },
            (NodeSpec::Line { thresholds }, Snapshot::Line { position, .. }) => *position >= thresholds[node],
            _ => false,
        }
    }

    /// Scores the post-step snapshots of a trajectory. A node counts as
    /// reached from the first step at which its predicate held.
    pub fn score(&self, snapshots: &[Snapshot], control_cost: f64) -> NodeScore {
        let mut first_hit: Vec<Option<usize>> = vec![None; self.len()];
        for (t, s) in snapshots.iter().enumerate() {
            for (node, hit) in first_hit.iter_mut().enumerate() {
                if hit.is_none() && self.satisfied(node, s) {
                    *hit = Some(t + 1);
                }
            }
        }
        let reached: Vec<usize> = first_hit.into_iter().flatten().collect();
        NodeScore {
            nodes_reached: reached.len(),
            steps_used: reached.iter().copied().max().unwrap_or(snapshots.len()),
            control_cost,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub nodes_reached: usize,
    pub steps_used: usize,
    pub control_cost: f64,
}

impl NodeScore {
    /// Lexicographic preference: more nodes, then fewer steps, then lower cost.
    pub fn cmp_preference(&self, other: &NodeScore) -> std::cmp::Ordering {
        self.nodes_reached
            .cmp(&other.nodes_reached)
            .then(other.steps_used.cmp(&self.steps_used))
            .then(other.control_cost.total_cmp(&self.control_cost))
    }
}
