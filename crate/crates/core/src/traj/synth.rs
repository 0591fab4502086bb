//! Seeded junction scenes with a known branch distribution.
//!
//! Every agent walks straight towards a junction while observed and then
//! leaves along one of several branches. The junction sits at the final
//! observed position, so the observation carries no information about which
//! branch will be taken.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Point, Scene, TrajectoryPair, Window};
use crate::error::{config, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Branch directions in degrees, relative to the approach heading.
    pub branches: Vec<f64>,
    pub branch_probs: Vec<f64>,
    pub speed_mps: f64,
    /// Standard deviation of i.i.d. coordinate noise, meters.
    pub noise_std: f64,
    pub agents_per_scene: usize,
    pub n_scenes: usize,
    pub seed: u64,
    /// Approach heading in degrees.
    pub heading_deg: f64,
    /// Seconds between frames.
    pub dt: f64,
    /// Lateral spacing between agents of one scene, meters.
    pub spacing: f64,
    pub t_obs: usize,
    pub t_pred: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            branches: vec![90.0, 0.0, -90.0],
            branch_probs: vec![1.0 / 3.0; 3],
            speed_mps: 1.2,
            noise_std: 0.05,
            agents_per_scene: 2,
            n_scenes: 100,
            seed: 0,
            heading_deg: 0.0,
            dt: 0.4,
            spacing: 1.5,
            t_obs: 8,
            t_pred: 12,
        }
    }
}

impl SynthConfig {
    pub fn window(&self) -> Window {
        Window {
            t_obs: self.t_obs,
            t_pred: self.t_pred,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() || self.branches.len() != self.branch_probs.len() {
            return Err(config("branches and branch_probs must be nonempty and of equal length"));
        }
        if self.branch_probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(config("branch probabilities must lie in [0, 1]"));
        }
        let total: f64 = self.branch_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(config(format!("branch probabilities sum to {total}, not 1")));
        }
        if !(self.speed_mps > 0.0 && self.dt > 0.0) || self.noise_std < 0.0 || !self.spacing.is_finite() {
            return Err(config("speed and dt must be positive, noise nonnegative"));
        }
        if self.agents_per_scene == 0 || self.t_obs < 2 || self.t_pred == 0 {
            return Err(config("need at least one agent, two observed and one future step"));
        }
        Ok(())
    }
}

fn unit(deg: f64) -> Point {
    let r = deg.to_radians();
    [r.cos(), r.sin()]
}

/// Generates scenes; a pure function of `(config, seed)`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<Scene>> {
    Ok(generate_synthetic_labeled(config, seed)?.0)
}

/// As [`generate_synthetic`], also returning the branch taken by each agent
/// (outer index scene, inner index agent).
pub fn generate_synthetic_labeled(config: &SynthConfig, seed: u64) -> Result<(Vec<Scene>, Vec<Vec<usize>>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| crate::Error::Config(e.to_string()))?;
    let heading = unit(config.heading_deg);
    let lateral = [-heading[1], heading[0]];
    let step = config.speed_mps * config.dt;

    let mut scenes = Vec::with_capacity(config.n_scenes);
    let mut labels = Vec::with_capacity(config.n_scenes);
    for s in 0..config.n_scenes {
        let junction = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
        let mut agents = Vec::with_capacity(config.agents_per_scene);
        let mut scene_labels = Vec::with_capacity(config.agents_per_scene);
        for k in 0..config.agents_per_scene {
            let off = (k as f64 - (config.agents_per_scene as f64 - 1.0) / 2.0) * config.spacing;
            let j = [junction[0] + off * lateral[0], junction[1] + off * lateral[1]];
            let branch = sample_branch(&config.branch_probs, &mut rng);
            let b = unit(config.heading_deg + config.branches[branch]);
            let mut jitter = || [noise.sample(&mut rng), noise.sample(&mut rng)];
            let observed = (0..config.t_obs)
                .map(|t| {
                    let back = step * (config.t_obs - 1 - t) as f64;
                    let n = jitter();
                    [j[0] - back * heading[0] + n[0], j[1] - back * heading[1] + n[1]]
                })
                .collect();
            let future = (1..=config.t_pred)
                .map(|t| {
                    let fwd = step * t as f64;
                    let n = jitter();
                    [j[0] + fwd * b[0] + n[0], j[1] + fwd * b[1] + n[1]]
                })
                .collect();
            let id = (s * config.agents_per_scene + k) as u64;
            agents.push(TrajectoryPair::new(id, observed, future)?);
            scene_labels.push(branch);
        }
        scenes.push(Scene::new(s as u64, agents)?);
        labels.push(scene_labels);
    }
    Ok((scenes, labels))
}

fn sample_branch(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc && p > 0.0 {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Index of the branch whose direction is closest to the displacement from
/// the last observed position to `endpoint`, measured relative to the
/// heading of the observed track.
pub fn classify_branch(observed: &[Point], endpoint: Point, branches_deg: &[f64]) -> usize {
    let first = observed[0];
    let last = observed[observed.len() - 1];
    let heading = (last[1] - first[1]).atan2(last[0] - first[0]);
    let dir = (endpoint[1] - last[1]).atan2(endpoint[0] - last[0]);
    let rel = dir - heading;
    let mut best = (0, f64::INFINITY);
    for (i, &b) in branches_deg.iter().enumerate() {
        let d = rel - b.to_radians();
        let wrapped = d.sin().atan2(d.cos()).abs();
        if wrapped < best.1 {
            best = (i, wrapped);
        }
    }
    best.0
}
