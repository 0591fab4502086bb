//! Whitespace-separated `frame_id ped_id x y` files as used by the ETH and UCY benchmarks.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::{Point, Scene, TrajectoryPair, Window};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IngestOptions {
    pub window: Window,
    /// Difference between consecutive frame ids in the file.
    pub frame_step: i64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            window: Window::default(),
            frame_step: 1,
        }
    }
}

pub fn ingest_ethucy(path: &Path, opts: IngestOptions) -> Result<Vec<Scene>> {
    let text = std::fs::read_to_string(path)?;
    let scenes = parse_ethucy(&text, path, opts)?;
    if scenes.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(scenes)
}

fn parse_int(field: &str) -> Option<i64> {
    field.parse::<i64>().ok().or_else(|| {
        let v = field.parse::<f64>().ok()?;
        (v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
    })
}

/// Parses the text of one file and segments it into windowed scenes.
///
/// Windows slide with a stride of one frame. A pedestrian contributes a window
/// only when every frame in it is present. Pedestrians whose windows cover the
/// same frame range form one scene; scenes are numbered in order of that range.
pub fn parse_ethucy(text: &str, path: &Path, opts: IngestOptions) -> Result<Vec<Scene>> {
    if opts.frame_step <= 0 {
        return Err(Error::Config("frame_step must be positive".into()));
    }
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut tracks: BTreeMap<u64, BTreeMap<i64, Point>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(perr(line_no, format!("expected 4 fields, found {}", fields.len())));
        }
        let frame = parse_int(fields[0]).ok_or_else(|| perr(line_no, format!("bad frame id {:?}", fields[0])))?;
        let ped = parse_int(fields[1])
            .filter(|&p| p >= 0)
            .ok_or_else(|| perr(line_no, format!("bad pedestrian id {:?}", fields[1])))? as u64;
        let mut xy = [0.0; 2];
        for (k, f) in fields[2..].iter().enumerate() {
            xy[k] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(line_no, format!("bad coordinate {f:?}")))?;
        }
        if tracks.entry(ped).or_default().insert(frame, xy).is_some() {
            return Err(perr(line_no, format!("duplicate observation of pedestrian {ped} at frame {frame}")));
        }
    }

    let w = opts.window;
    let span = (w.len() as i64 - 1) * opts.frame_step;
    let mut groups: BTreeMap<(i64, i64), Vec<TrajectoryPair>> = BTreeMap::new();
    for (&ped, frames) in &tracks {
        for &start in frames.keys() {
            let pts: Option<Vec<Point>> = (0..w.len() as i64)
                .map(|k| frames.get(&(start + k * opts.frame_step)).copied())
                .collect();
            let Some(pts) = pts else { continue };
            let (obs, fut) = pts.split_at(w.t_obs);
            groups
                .entry((start, start + span))
                .or_default()
                .push(TrajectoryPair::new(ped, obs.to_vec(), fut.to_vec())?);
        }
    }

    groups
        .into_values()
        .enumerate()
        .map(|(i, agents)| Scene::new(i as u64, agents))
        .collect()
}

/// Serialises scenes so that [`parse_ethucy`] with the same window and frame
/// step reproduces them. Scene `i` occupies its own block of frames; agent ids
/// must be unique across all scenes.
pub fn write_ethucy(scenes: &[Scene], frame_step: i64) -> Result<String> {
    let mut seen: HashMap<u64, u64> = HashMap::new();
    let mut out = String::new();
    let mut base = 0i64;
    for scene in scenes {
        let len = scene.agents.first().map_or(0, |a| a.observed.len() + a.future.len());
        for a in &scene.agents {
            if let Some(prev) = seen.insert(a.agent_id, scene.scene_id) {
                return Err(Error::Domain(format!(
                    "agent id {} appears in scenes {prev} and {}",
                    a.agent_id, scene.scene_id
                )));
            }
            if a.observed.len() + a.future.len() != len {
                return Err(Error::Shape(format!("scene {} mixes window lengths", scene.scene_id)));
            }
        }
        for t in 0..len {
            let frame = base + t as i64 * frame_step;
            for a in &scene.agents {
                let p = if t < a.observed.len() {
                    a.observed[t]
                } else {
                    a.future[t - a.observed.len()]
                };
                writeln!(out, "{frame}\t{}\t{}\t{}", a.agent_id, p[0], p[1]).expect("write to string");
            }
        }
        base += (len as i64 + 1) * frame_step;
    }
    Ok(out)
}
