//! Static SVG figures. Polyline points are written in data coordinates, so
//! each figure carries exactly the values listed in its sidecar CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use agma::traj::{Point, Scene};

use crate::CliError;

pub const OVERLAY_HEADER: &str = "agent_id,polyline,kind,step,x,y";
pub const CURVE_HEADER: &str = "series,x,y";

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Bounds {
    lo: Point,
    hi: Point,
}

impl Bounds {
    fn of<'a>(points: impl Iterator<Item = &'a Point>) -> Self {
        let mut b = Bounds {
            lo: [f64::INFINITY; 2],
            hi: [f64::NEG_INFINITY; 2],
        };
        for p in points {
            for d in 0..2 {
                b.lo[d] = b.lo[d].min(p[d]);
                b.hi[d] = b.hi[d].max(p[d]);
            }
        }
        if !b.lo[0].is_finite() {
            b = Bounds { lo: [0.0; 2], hi: [1.0; 2] };
        }
        b
    }

    /// Opening tag of an SVG whose inner group uses data coordinates with y up.
    fn open(&self, title: &str, keep_aspect: bool) -> String {
        let pad = |lo: f64, hi: f64| ((hi - lo) * 0.05).max(1e-3);
        let (px, py) = (pad(self.lo[0], self.hi[0]), pad(self.lo[1], self.hi[1]));
        let (x0, y0) = (self.lo[0] - px, -(self.hi[1] + py));
        let (w, h) = (self.hi[0] - self.lo[0] + 2.0 * px, self.hi[1] - self.lo[1] + 2.0 * py);
        let aspect = if keep_aspect { "xMidYMid meet" } else { "none" };
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" viewBox=\"{x0} {y0} {w} {h}\" preserveAspectRatio=\"{aspect}\">\n<title>{title}</title>\n<g transform=\"scale(1,-1)\" fill=\"none\">\n"
        )
    }
}

const CLOSE: &str = "</g>\n</svg>\n";

fn polyline(out: &mut String, points: &[Point], attrs: &str) {
    let pts: Vec<String> = points.iter().map(|p| format!("{},{}", p[0], p[1])).collect();
    let _ = writeln!(
        out,
        "<polyline {attrs} vector-effect=\"non-scaling-stroke\" points=\"{}\"/>",
        pts.join(" ")
    );
}

/// Observed track, ground truth and every sample of each agent in a scene.
///
/// `samples` maps agent id to that agent's sampled futures; agents without
/// samples are skipped.
pub fn scene_overlay(scene: &Scene, samples: &BTreeMap<u64, Vec<Vec<Point>>>) -> (String, String) {
    let mut lines: Vec<(u64, usize, &str, Vec<Point>)> = Vec::new();
    for a in &scene.agents {
        let Some(s) = samples.get(&a.agent_id) else { continue };
        lines.push((a.agent_id, 0, "observed", a.observed.clone()));
        lines.push((a.agent_id, 1, "truth", a.future.clone()));
        for (i, f) in s.iter().enumerate() {
            lines.push((a.agent_id, 2 + i, "sample", f.clone()));
        }
    }
    let bounds = Bounds::of(lines.iter().flat_map(|l| l.3.iter()));
    let mut svg = bounds.open(&format!("scene {}", scene.scene_id), true);
    let mut csv = String::from(OVERLAY_HEADER);
    csv.push('\n');
    for (agent, idx, kind, pts) in &lines {
        let style = match *kind {
            "observed" => "stroke=\"#000000\" stroke-width=\"2\"",
            "truth" => "stroke=\"#2ca02c\" stroke-width=\"2\"",
            _ => "stroke=\"#1f77b4\" stroke-width=\"1\" stroke-opacity=\"0.5\"",
        };
        polyline(
            &mut svg,
            pts,
            &format!("data-agent=\"{agent}\" data-polyline=\"{idx}\" data-kind=\"{kind}\" {style}"),
        );
        for (step, p) in pts.iter().enumerate() {
            let _ = writeln!(csv, "{agent},{idx},{kind},{step},{},{}", p[0], p[1]);
        }
    }
    svg.push_str(CLOSE);
    (svg, csv)
}

/// Plots every fully numeric column of `csv` against its first column.
pub fn curves(csv: &str, title: &str) -> Result<(String, String), CliError> {
    let mut rows = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = rows
        .next()
        .ok_or_else(|| CliError::Input(format!("{title}: empty table")))?
        .split(',')
        .map(str::trim)
        .collect();
    if header.len() < 2 {
        return Err(CliError::Input(format!("{title}: need at least two columns")));
    }
    let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); header.len()];
    for (i, row) in rows.enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != header.len() {
            return Err(CliError::Input(format!("{title}: row {} has {} cells", i + 2, cells.len())));
        }
        for (c, cell) in cells.iter().enumerate() {
            cols[c].push(cell.trim().parse::<f64>().ok().filter(|v| v.is_finite()));
        }
    }
    let xs: Vec<f64> = cols[0]
        .iter()
        .map(|v| v.ok_or_else(|| CliError::Input(format!("{title}: non-numeric {}", header[0]))))
        .collect::<Result<_, _>>()?;
    let series: Vec<(&str, Vec<Point>)> = (1..header.len())
        .filter_map(|c| {
            let ys: Option<Vec<f64>> = cols[c].iter().copied().collect();
            ys.filter(|y| !y.is_empty())
                .map(|ys| (header[c], xs.iter().zip(ys).map(|(&x, y)| [x, y]).collect()))
        })
        .collect();
    if series.is_empty() {
        return Err(CliError::Input(format!("{title}: no numeric series")));
    }
    let bounds = Bounds::of(series.iter().flat_map(|s| s.1.iter()));
    let mut svg = bounds.open(title, false);
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        polyline(&mut svg, pts, &format!("data-series=\"{name}\" stroke=\"{color}\" stroke-width=\"2\""));
        for p in pts {
            let _ = writeln!(out, "{name},{},{}", p[0], p[1]);
        }
    }
    svg.push_str(CLOSE);
    Ok((svg, out))
}

/// Parses the `points` attribute of every polyline in an SVG produced here.
pub fn svg_polylines(svg: &str) -> Vec<Vec<Point>> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .filter_map(|l| {
            let start = l.find("points=\"")? + 8;
            let end = start + l[start..].find('"')?;
            l[start..end]
                .split_whitespace()
                .map(|p| {
                    let (x, y) = p.split_once(',')?;
                    Some([x.parse().ok()?, y.parse().ok()?])
                })
                .collect()
        })
        .collect()
}
