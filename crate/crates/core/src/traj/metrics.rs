use super::{Point, PredictionSet};
use crate::error::{domain, shape, Result};

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn same_len(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(shape(format!(
            "prediction has {} steps, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Average displacement error: mean Euclidean distance over timesteps.
pub fn ade(pred: &[Point], gt: &[Point]) -> Result<f64> {
    same_len(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum::<f64>() / gt.len() as f64)
}

/// Final displacement error: Euclidean distance at the last timestep.
pub fn fde(pred: &[Point], gt: &[Point]) -> Result<f64> {
    same_len(pred, gt)?;
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinOfN {
    pub min_ade: f64,
    pub min_fde: f64,
    pub argmin_ade: usize,
    pub argmin_fde: usize,
}

/// Best-of-N ADE and FDE over a prediction set (each minimised independently).
pub fn min_of_n(preds: &PredictionSet, gt: &[Point]) -> Result<MinOfN> {
    if preds.is_empty() {
        return Err(domain("min-of-N over an empty prediction set"));
    }
    let mut best = MinOfN {
        min_ade: f64::INFINITY,
        min_fde: f64::INFINITY,
        argmin_ade: 0,
        argmin_fde: 0,
    };
    for (i, s) in preds.samples().iter().enumerate() {
        let a = ade(s, gt)?;
        let f = fde(s, gt)?;
        if a < best.min_ade {
            best.min_ade = a;
            best.argmin_ade = i;
        }
        if f < best.min_fde {
            best.min_fde = f;
            best.argmin_fde = i;
        }
    }
    Ok(best)
}
