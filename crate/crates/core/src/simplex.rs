//! Maps from real scores onto the probability simplex.

/// Numerically stable `log(sum(exp(x)))`; `-inf` for an empty or all `-inf` input.
pub fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = logsumexp(x);
    x.iter().map(|&v| (v - lse).exp()).collect()
}

const ENTMAX_TOL: f64 = 1e-9;
const ENTMAX_MAX_ITERS: usize = 100;

/// 1.5-entmax: `p_i = [x_i / 2 - tau]_+^2` with `tau` chosen so that `p` sums to one.
///
/// The threshold is bracketed in `[max/2 - 1, max/2]` and located by bisection
/// on the KKT stationarity residual. Once the support has been identified the
/// threshold is recomputed exactly from the quadratic on that support.
pub fn entmax15(x: &[f64]) -> Vec<f64> {
    assert!(!x.is_empty(), "entmax over an empty vector");
    let y: Vec<f64> = x.iter().map(|&v| v / 2.0).collect();
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mass = |tau: f64| -> f64 {
        y.iter()
            .map(|&v| {
                let t = (v - tau).max(0.0);
                t * t
            })
            .sum()
    };

    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..ENTMAX_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < ENTMAX_TOL {
            break;
        }
    }
    let tau_bisect = 0.5 * (lo + hi);

    // Exact threshold on the bisected support: k tau^2 - 2 S1 tau + S2 - 1 = 0.
    let support: Vec<f64> = y.iter().copied().filter(|&v| v > tau_bisect).collect();
    let k = support.len() as f64;
    let s1: f64 = support.iter().sum();
    let s2: f64 = support.iter().map(|v| v * v).sum();
    let disc = s1 * s1 - k * (s2 - 1.0);
    let tau = if k > 0.0 && disc >= 0.0 {
        let t = (s1 - disc.sqrt()) / k;
        let consistent = support.iter().all(|&v| v > t)
            && y.iter().filter(|&&v| v <= tau_bisect).all(|&v| v <= t + ENTMAX_TOL);
        if consistent {
            t
        } else {
            tau_bisect
        }
    } else {
        tau_bisect
    };

    let mut p: Vec<f64> = y
        .iter()
        .map(|&v| {
            let t = (v - tau).max(0.0);
            t * t
        })
        .collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

/// Vector-Jacobian product of [`entmax15`] given its output `p` and upstream gradient `g`.
pub fn entmax15_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = p.iter().map(|&v| if v > 0.0 { v.sqrt() } else { 0.0 }).collect();
    let ss: f64 = s.iter().sum();
    let sg: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
    let q = if ss > 0.0 { sg / ss } else { 0.0 };
    s.iter().zip(g).map(|(&si, &gi)| si * (gi - q)).collect()
}
