//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

pub mod grad_suite;

/// Dense two-phase simplex for `min c.x` s.t. `A x = b`, `x >= 0`, with Bland's rule.
pub fn simplex_min(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Option<f64> {
    let m = a.len();
    let n = c.len();
    // tableau columns: n originals, m artificials, rhs
    let width = n + m + 1;
    let mut tab: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
            let mut row = vec![0.0; width];
            for j in 0..n {
                row[j] = sign * a[i][j];
            }
            row[n + i] = 1.0;
            row[width - 1] = sign * b[i];
            row
        })
        .collect();
    let mut basis: Vec<usize> = (n..n + m).collect();

    let run =
        |tab: &mut Vec<Vec<f64>>, basis: &mut Vec<usize>, cost: &[f64], allowed: usize| -> bool {
            for _ in 0..10_000 {
                let reduced = |j: usize, tab: &Vec<Vec<f64>>, basis: &Vec<usize>| {
                    let mut r = cost[j];
                    for (i, &bi) in basis.iter().enumerate() {
                        r -= cost[bi] * tab[i][j];
                    }
                    r
                };
                let Some(enter) =
                    (0..allowed).find(|&j| !basis.contains(&j) && reduced(j, tab, basis) < -1e-12)
                else {
                    return true;
                };
                let mut leave: Option<(usize, f64)> = None;
                for i in 0..tab.len() {
                    let coef = tab[i][enter];
                    if coef > 1e-12 {
                        let ratio = tab[i][width - 1] / coef;
                        match leave {
                            None => leave = Some((i, ratio)),
                            Some((li, lr)) => {
                                if ratio < lr - 1e-15
                                    || (ratio <= lr + 1e-15 && basis[i] < basis[li])
                                {
                                    leave = Some((i, ratio));
                                }
                            }
                        }
                    }
                }
                let Some((r, _)) = leave else {
                    return false;
                };
                let piv = tab[r][enter];
                for v in tab[r].iter_mut() {
                    *v /= piv;
                }
                let pivot_row = tab[r].clone();
                for (i, row) in tab.iter_mut().enumerate() {
                    if i != r {
                        let f = row[enter];
                        if f != 0.0 {
                            for (v, p) in row.iter_mut().zip(&pivot_row) {
                                *v -= f * p;
                            }
                        }
                    }
                }
                basis[r] = enter;
            }
            false
        };

    let mut phase1 = vec![0.0; n + m];
    for v in phase1.iter_mut().skip(n) {
        *v = 1.0;
    }
    if !run(&mut tab, &mut basis, &phase1, n + m) {
        return None;
    }
    let infeas: f64 = basis
        .iter()
        .enumerate()
        .filter(|(_, &bi)| bi >= n)
        .map(|(i, _)| tab[i][width - 1])
        .sum();
    if infeas > 1e-9 {
        return None;
    }
    // drive zero-level artificials out of the basis
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| !basis.contains(&j) && tab[i][j].abs() > 1e-12) {
                let piv = tab[i][j];
                for v in tab[i].iter_mut() {
                    *v /= piv;
                }
                let pr = tab[i].clone();
                for (k, row) in tab.iter_mut().enumerate() {
                    if k != i {
                        let f = row[j];
                        for (v, p) in row.iter_mut().zip(&pr) {
                            *v -= f * p;
                        }
                    }
                }
                basis[i] = j;
            }
        }
    }
    let mut phase2 = c.to_vec();
    phase2.extend(std::iter::repeat_n(0.0, m));
    if !run(&mut tab, &mut basis, &phase2, n) {
        return None;
    }
    Some(
        basis
            .iter()
            .enumerate()
            .map(|(i, &bi)| phase2[bi] * tab[i][width - 1])
            .sum(),
    )
}

/// Exact optimal transport cost by linear programming.
pub fn ot_lp(cost: &[Vec<f64>], a: &[f64], b: &[f64]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..m {
        let mut r = vec![0.0; m * n];
        for j in 0..n {
            r[i * n + j] = 1.0;
        }
        rows.push(r);
        rhs.push(a[i]);
    }
    // last column constraint is implied by the others
    for j in 0..n.saturating_sub(1) {
        let mut r = vec![0.0; m * n];
        for i in 0..m {
            r[i * n + j] = 1.0;
        }
        rows.push(r);
        rhs.push(b[j]);
    }
    let c: Vec<f64> = cost.iter().flatten().copied().collect();
    simplex_min(&rows, &rhs, &c).expect("transport LP is feasible and bounded")
}

/// 1.5-entmax from the closed-form threshold over sorted scores.
pub fn entmax15_sorted(x: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = x.iter().map(|v| v / 2.0).collect();
    let mut s = z.clone();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut tau_star = f64::NAN;
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for k in 1..=s.len() {
        sum += s[k - 1];
        sumsq += s[k - 1] * s[k - 1];
        let kf = k as f64;
        let mean = sum / kf;
        let ss = sumsq / kf - mean * mean;
        let delta = (1.0 - kf * ss) / kf;
        if delta < 0.0 {
            break;
        }
        let tau = mean - delta.sqrt();
        if s[k - 1] > tau {
            tau_star = tau;
        } else {
            break;
        }
    }
    z.iter().map(|&v| (v - tau_star).max(0.0).powi(2)).collect()
}

pub fn union_find_labels(adj: &[Vec<bool>]) -> Vec<usize> {
    let n = adj.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    for i in 0..n {
        for j in 0..n {
            if adj[i][j] {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Whether two labelings induce the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len()
        && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

/// Best ADE and FDE over candidates by direct enumeration.
pub fn scan_min_of_n(cands: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> (f64, f64) {
    let mut best_ade = f64::INFINITY;
    let mut best_fde = f64::INFINITY;
    for c in cands {
        let mut total = 0.0;
        for t in 0..gt.len() {
            total += ((c[t][0] - gt[t][0]).powi(2) + (c[t][1] - gt[t][1]).powi(2)).sqrt();
        }
        best_ade = best_ade.min(total / gt.len() as f64);
        let l = gt.len() - 1;
        best_fde =
            best_fde.min(((c[l][0] - gt[l][0]).powi(2) + (c[l][1] - gt[l][1]).powi(2)).sqrt());
    }
    (best_ade, best_fde)
}

/// Composite Simpson rule on `[lo, hi]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let x = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates skipped because the one-sided slopes disagree (a kink within `h`).
    pub nonsmooth: usize,
    pub max_rel: f64,
}

impl FdReport {
    pub fn merge(&mut self, o: FdReport) {
        self.checked += o.checked;
        self.nonsmooth += o.nonsmooth;
        self.max_rel = self.max_rel.max(o.max_rel);
    }
}

pub const FD_STEP: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-6;

/// Central differences of `f` at `x` along `coords`, compared with `grad`.
///
/// Relative error is `|g - fd| / max(|g|, |fd|, REL_FLOOR)`. A coordinate is
/// classed nonsmooth when the gap between one-sided slopes does not scale
/// linearly with the step, which only happens at a kink inside the stencil.
pub fn fd_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    coords: &[usize],
) -> FdReport {
    let h = FD_STEP;
    let mut rep = FdReport::default();
    let mut xp = x.to_vec();
    let f0 = f(x);
    let mut at = |xp: &mut Vec<f64>, i: usize, dx: f64| {
        xp[i] = x[i] + dx;
        let v = f(xp);
        xp[i] = x[i];
        v
    };
    for &i in coords {
        let (fp, fm) = (at(&mut xp, i, h), at(&mut xp, i, -h));
        let (fp2, fm2) = (at(&mut xp, i, h / 2.0), at(&mut xp, i, -h / 2.0));
        let fd = (fp - fm) / (2.0 * h);
        let gap = (fp - f0) / h - (f0 - fm) / h;
        let gap2 = (fp2 - f0) / (h / 2.0) - (f0 - fm2) / (h / 2.0);
        let scale = fd.abs().max(grad[i].abs()).max(REL_FLOOR);
        if (gap - 2.0 * gap2).abs() > 1e-3 * scale {
            rep.nonsmooth += 1;
            continue;
        }
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(REL_FLOOR);
        rep.max_rel = rep.max_rel.max(rel);
        rep.checked += 1;
    }
    rep
}
