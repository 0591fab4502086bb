//! Trajectory domain types, displacement metrics and data sources.

mod ethucy;
mod metrics;
mod synth;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};

pub use ethucy::{ingest_ethucy, parse_ethucy, write_ethucy, IngestOptions};
pub use metrics::{ade, fde, min_of_n, MinOfN};
pub use synth::{classify_branch, generate_synthetic, generate_synthetic_labeled, SynthConfig};

/// A 2-D position in meters.
pub type Point = [f64; 2];

/// Observation and prediction horizons, in frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub t_obs: usize,
    pub t_pred: usize,
}

impl Default for Window {
    fn default() -> Self {
        Self { t_obs: 8, t_pred: 12 }
    }
}

impl Window {
    pub fn len(&self) -> usize {
        self.t_obs + self.t_pred
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    pub agent_id: u64,
    pub observed: Vec<Point>,
    pub future: Vec<Point>,
}

impl TrajectoryPair {
    pub fn new(agent_id: u64, observed: Vec<Point>, future: Vec<Point>) -> Result<Self> {
        if observed.is_empty() || future.is_empty() {
            return Err(shape(format!("agent {agent_id}: empty observed or future track")));
        }
        if !observed.iter().chain(&future).flatten().all(|v| v.is_finite()) {
            return Err(domain(format!("agent {agent_id}: non-finite coordinate")));
        }
        Ok(Self {
            agent_id,
            observed,
            future,
        })
    }

    pub fn check_window(&self, window: Window) -> Result<()> {
        if self.observed.len() != window.t_obs || self.future.len() != window.t_pred {
            return Err(shape(format!(
                "agent {}: track lengths {}+{} do not match window {}+{}",
                self.agent_id,
                self.observed.len(),
                self.future.len(),
                window.t_obs,
                window.t_pred
            )));
        }
        Ok(())
    }

    pub fn last_observed(&self) -> Point {
        *self.observed.last().expect("observed track is nonempty")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub agents: Vec<TrajectoryPair>,
}

impl Scene {
    pub fn new(scene_id: u64, agents: Vec<TrajectoryPair>) -> Result<Self> {
        if agents.is_empty() {
            return Err(domain(format!("scene {scene_id} has no agents")));
        }
        let mut seen = HashSet::new();
        for a in &agents {
            if !seen.insert(a.agent_id) {
                return Err(domain(format!("scene {scene_id}: duplicate agent id {}", a.agent_id)));
            }
        }
        Ok(Self { scene_id, agents })
    }

    pub fn check_window(&self, window: Window) -> Result<()> {
        self.agents.iter().try_for_each(|a| a.check_window(window))
    }
}

/// A group of scenes processed together in one training step.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    scenes: &'a [Scene],
}

impl<'a> Batch<'a> {
    pub fn new(scenes: &'a [Scene]) -> Result<Self> {
        if scenes.iter().map(|s| s.agents.len()).sum::<usize>() == 0 {
            return Err(domain("batch contains no agents"));
        }
        Ok(Self { scenes })
    }

    pub fn scenes(&self) -> &'a [Scene] {
        self.scenes
    }

    /// Total agent count across all scenes.
    pub fn n_agents(&self) -> usize {
        self.scenes.iter().map(|s| s.agents.len()).sum()
    }

    /// Every agent paired with the index of its scene within the batch.
    pub fn agents(&self) -> impl Iterator<Item = (usize, &'a TrajectoryPair)> + 'a {
        self.scenes
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.agents.iter().map(move |a| (i, a)))
    }
}

/// `N` candidate futures for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    samples: Vec<Vec<Point>>,
}

impl PredictionSet {
    pub fn new(samples: Vec<Vec<Point>>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(domain("prediction set must hold at least one sample"));
        };
        let len = first.len();
        if samples.iter().any(|s| s.len() != len) {
            return Err(shape("prediction samples differ in length"));
        }
        if !samples.iter().flatten().flatten().all(|v| v.is_finite()) {
            return Err(domain("non-finite predicted coordinate"));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Vec<Point>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `k` samples.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        Self::new(self.samples.iter().take(k).cloned().collect())
    }
}
