//! Exact checks of the prior/sampler error decomposition on finite latent and outcome spaces.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{shape, Error, Result};

const SIMPLEX_TOL: f64 = 1e-12;
/// Slack allowed when comparing against proved inequalities.
pub const CHECK_TOL: f64 = 1e-12;

fn check_dist(p: &[f64], what: &str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Domain(format!("{what} is not a distribution (sum {total})")));
    }
    Ok(())
}

/// Latent of size `C`, outcome of size `V`; priors are `C`-vectors, samplers `C x V` row-stochastic.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteModel {
    pub p_prior: Vec<f64>,
    pub q_prior: Vec<f64>,
    pub p_sampler: Vec<Vec<f64>>,
    pub q_sampler: Vec<Vec<f64>>,
}

impl DiscreteModel {
    pub fn new(p_prior: Vec<f64>, q_prior: Vec<f64>, p_sampler: Vec<Vec<f64>>, q_sampler: Vec<Vec<f64>>) -> Result<Self> {
        let c = p_prior.len();
        if q_prior.len() != c || p_sampler.len() != c || q_sampler.len() != c {
            return Err(shape("latent sizes differ"));
        }
        let v = p_sampler.first().map_or(0, Vec::len);
        check_dist(&p_prior, "true prior")?;
        check_dist(&q_prior, "learned prior")?;
        for row in p_sampler.iter().chain(&q_sampler) {
            if row.len() != v {
                return Err(shape("sampler rows differ in outcome size"));
            }
            check_dist(row, "sampler row")?;
        }
        Ok(Self {
            p_prior,
            q_prior,
            p_sampler,
            q_sampler,
        })
    }

    /// A model whose learned side equals its true side.
    pub fn matched(prior: Vec<f64>, sampler: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(prior.clone(), prior, sampler.clone(), sampler)
    }

    pub fn latent_size(&self) -> usize {
        self.p_prior.len()
    }

    pub fn outcome_size(&self) -> usize {
        self.p_sampler[0].len()
    }
}

/// `sum_c prior[c] sampler[c][.]`.
pub fn marginal(prior: &[f64], sampler: &[Vec<f64>]) -> Result<Vec<f64>> {
    if prior.len() != sampler.len() || sampler.is_empty() {
        return Err(shape("prior and sampler latent sizes differ"));
    }
    let v = sampler[0].len();
    let mut out = vec![0.0; v];
    for (w, row) in prior.iter().zip(sampler) {
        if row.len() != v {
            return Err(shape("ragged sampler"));
        }
        for (o, x) in out.iter_mut().zip(row) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// `KL(p || q)`; `+inf` when `q` misses mass of `p`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a == 0.0 {
                0.0
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln()
            }
        })
        .sum()
}

pub fn l1(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub eps_prior: f64,
    pub eps_sample: f64,
    pub l_dist: f64,
    /// Set when the learned marginal misses mass of the true one.
    pub infinite_kl: bool,
}

pub fn errors_decompose(m: &DiscreteModel) -> Decomposition {
    let v = m.outcome_size();
    let mut prior_gap = vec![0.0; v];
    let mut sample_gap = vec![0.0; v];
    for c in 0..m.latent_size() {
        let dp = m.p_prior[c] - m.q_prior[c];
        for y in 0..v {
            prior_gap[y] += dp * m.q_sampler[c][y];
            sample_gap[y] += m.p_prior[c] * (m.p_sampler[c][y] - m.q_sampler[c][y]);
        }
    }
    let p = marginal(&m.p_prior, &m.p_sampler).expect("validated");
    let q = marginal(&m.q_prior, &m.q_sampler).expect("validated");
    let l_dist = kl(&p, &q);
    Decomposition {
        eps_prior: prior_gap.iter().map(|x| x.abs()).sum(),
        eps_sample: sample_gap.iter().map(|x| x.abs()).sum(),
        l_dist,
        infinite_kl: l_dist.is_infinite(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    pub bound: f64,
    pub holds: bool,
    pub slack: f64,
}

/// `L_dist >= (eps_prior - eps_sample)^2 / 2`.
pub fn check_theorem(m: &DiscreteModel) -> BoundCheck {
    let d = errors_decompose(m);
    let bound = 0.5 * (d.eps_prior - d.eps_sample).powi(2);
    BoundCheck {
        bound,
        holds: d.l_dist >= bound - CHECK_TOL,
        slack: d.l_dist - bound,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinskerCheck {
    pub kl: f64,
    pub half_l1_sq: f64,
    pub holds: bool,
}

pub fn check_pinsker(p: &[f64], q: &[f64]) -> Result<PinskerCheck> {
    if p.len() != q.len() {
        return Err(shape("distributions differ in size"));
    }
    check_dist(p, "p")?;
    check_dist(q, "q")?;
    let k = kl(p, q);
    let h = 0.5 * l1(p, q).powi(2);
    Ok(PinskerCheck {
        kl: k,
        half_l1_sq: h,
        holds: k >= h - CHECK_TOL,
    })
}

/// Whenever `L_dist < delta`, the prior error must stay below `sqrt(2 delta) + eps_sample`.
pub fn check_corollary(m: &DiscreteModel, delta: f64) -> bool {
    let d = errors_decompose(m);
    if !(d.l_dist < delta) {
        return true;
    }
    d.eps_prior < (2.0 * delta).sqrt() + d.eps_sample + CHECK_TOL
}

/// Whether the model lies where the prior error exceeds the sampler error.
pub fn in_corollary_regime(m: &DiscreteModel) -> bool {
    let d = errors_decompose(m);
    d.eps_prior > d.eps_sample
}

/// Exact `I(Y; z)` in nats, as the divergence of the joint from the product of marginals.
pub fn mutual_information(prior: &[f64], sampler: &[Vec<f64>]) -> Result<f64> {
    let py = marginal(prior, sampler)?;
    let mut i = 0.0;
    for (w, row) in prior.iter().zip(sampler) {
        for (x, y) in row.iter().zip(&py) {
            let joint = w * x;
            if joint > 0.0 {
                i += joint * (x / y).ln();
            }
        }
    }
    Ok(i)
}

/// `H(Y | z) = sum_c prior[c] H(sampler[c])`.
pub fn conditional_entropy(prior: &[f64], sampler: &[Vec<f64>]) -> f64 {
    prior.iter().zip(sampler).map(|(w, row)| w * entropy(row)).sum()
}

/// Merges latent states by `groups[c]` (labels `0..k`), keeping the true joint.
pub fn coarsen(prior: &[f64], sampler: &[Vec<f64>], groups: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if groups.len() != prior.len() {
        return Err(shape("one group label per latent state"));
    }
    let k = groups.iter().max().map_or(0, |m| m + 1);
    let v = sampler[0].len();
    let mut p = vec![0.0; k];
    let mut joint = vec![vec![0.0; v]; k];
    for c in 0..prior.len() {
        p[groups[c]] += prior[c];
        for y in 0..v {
            joint[groups[c]][y] += prior[c] * sampler[c][y];
        }
    }
    if p.iter().any(|&x| x == 0.0) {
        return Err(Error::Domain("every group needs positive mass".into()));
    }
    let rows = joint
        .into_iter()
        .zip(&p)
        .map(|(row, &w)| row.into_iter().map(|x| x / w).collect())
        .collect();
    Ok((p, rows))
}

/// One level of an information-gap sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoGapRow {
    pub states: usize,
    pub mutual_info: f64,
    pub cond_entropy: f64,
    /// Smallest `KL(p(Y) || q(Y))` over the sampler family.
    pub min_l_dist: f64,
    /// Smallest sampler error over the sampler family.
    pub min_eps_sample: f64,
}

pub const NOISE_GRID: usize = 100;

/// Exhaustive search over the noisy-deterministic sampler family.
///
/// Each latent state `c` emits outcome `y_c` with probability `1 - eta` and a
/// uniform outcome otherwise; `eta` is shared and runs over `0, 0.01, ..., 1`,
/// the `y_c` over all assignments. The learned prior equals the true one.
pub fn best_sampler(prior: &[f64], sampler: &[Vec<f64>]) -> Result<(f64, f64)> {
    let c = prior.len();
    let v = sampler[0].len();
    let p_y = marginal(prior, sampler)?;
    let total = v.checked_pow(c as u32).filter(|&t| t <= 1 << 22).ok_or_else(|| {
        Error::Domain(format!("{c} states over {v} outcomes is too large to enumerate"))
    })?;
    let mut best_l = f64::INFINITY;
    let mut best_s = f64::INFINITY;
    let mut assign = vec![0usize; c];
    let mut q_y = vec![0.0; v];
    let mut gap = vec![0.0; v];
    for code in 0..total {
        let mut rem = code;
        for a in assign.iter_mut() {
            *a = rem % v;
            rem /= v;
        }
        for step in 0..=NOISE_GRID {
            let eta = step as f64 / NOISE_GRID as f64;
            let floor = eta / v as f64;
            q_y.iter_mut().for_each(|x| *x = floor);
            gap.iter_mut().for_each(|x| *x = 0.0);
            for (ci, &y) in assign.iter().enumerate() {
                q_y[y] += prior[ci] * (1.0 - eta);
                for (o, g) in gap.iter_mut().enumerate() {
                    let q = floor + if o == y { 1.0 - eta } else { 0.0 };
                    *g += prior[ci] * (sampler[ci][o] - q);
                }
            }
            best_l = best_l.min(kl(&p_y, &q_y));
            best_s = best_s.min(gap.iter().map(|x| x.abs()).sum());
        }
    }
    Ok((best_l, best_s))
}

/// Coarsens the latent one merge at a time (last two states) down to a single state.
pub fn info_gap_sweep(prior: &[f64], sampler: &[Vec<f64>]) -> Result<Vec<InfoGapRow>> {
    check_dist(prior, "prior")?;
    for row in sampler {
        check_dist(row, "sampler row")?;
    }
    let mut p = prior.to_vec();
    let mut s = sampler.to_vec();
    let mut rows = Vec::new();
    loop {
        let (min_l_dist, min_eps_sample) = best_sampler(&p, &s)?;
        rows.push(InfoGapRow {
            states: p.len(),
            mutual_info: mutual_information(&p, &s)?,
            cond_entropy: conditional_entropy(&p, &s),
            min_l_dist,
            min_eps_sample,
        });
        if p.len() == 1 {
            return Ok(rows);
        }
        let k = p.len();
        let groups: Vec<usize> = (0..k).map(|c| c.min(k - 2)).collect();
        (p, s) = coarsen(&p, &s, &groups)?;
    }
}

pub fn info_gap_csv(rows: &[InfoGapRow]) -> String {
    let mut out = String::from("states,mutual_info,cond_entropy,min_l_dist,min_eps_sample\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.states, r.mutual_info, r.cond_entropy, r.min_l_dist, r.min_eps_sample
        );
    }
    out
}

/// Dirichlet(1, ..., 1) draw.
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= total);
    x
}

pub fn random_model<R: Rng + ?Sized>(rng: &mut R, latent: usize, outcomes: usize) -> DiscreteModel {
    let rows = |rng: &mut R| (0..latent).map(|_| random_simplex(rng, outcomes)).collect::<Vec<_>>();
    let p_prior = random_simplex(rng, latent);
    let q_prior = random_simplex(rng, latent);
    let p_sampler = rows(rng);
    let q_sampler = rows(rng);
    DiscreteModel::new(p_prior, q_prior, p_sampler, q_sampler).expect("dirichlet draws are valid")
}

pub const MAX_LATENT: usize = 5;
pub const MAX_OUTCOMES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub model_id: usize,
    pub latent: usize,
    pub outcomes: usize,
    pub decomposition: Decomposition,
    pub theorem: BoundCheck,
    pub pinsker: PinskerCheck,
    pub delta: f64,
    pub corollary: bool,
}

impl SweepRow {
    pub fn violated(&self) -> bool {
        !(self.theorem.holds && self.pinsker.holds && self.corollary)
    }
}

/// Randomised sweep over `n` models with `C <= 5`, `V <= 8`.
///
/// With `matched`, each model's learned side is set to its true side.
/// The corollary is checked at `delta = L_dist + u / 10`, `u ~ U(0, 1)`.
pub fn theory_sweep(n: usize, seed: u64, matched: bool) -> Vec<SweepRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let c = rng.random_range(1..=MAX_LATENT);
            let v = rng.random_range(2..=MAX_OUTCOMES);
            let mut m = random_model(&mut rng, c, v);
            if matched {
                m = DiscreteModel::matched(m.p_prior, m.p_sampler).expect("valid");
            }
            let decomposition = errors_decompose(&m);
            let theorem = check_theorem(&m);
            let p = marginal(&m.p_prior, &m.p_sampler).expect("valid");
            let q = marginal(&m.q_prior, &m.q_sampler).expect("valid");
            let pinsker = check_pinsker(&renormalised(p), &renormalised(q)).expect("valid");
            let delta = decomposition.l_dist + rng.random::<f64>() * 0.1;
            let corollary = check_corollary(&m, delta);
            SweepRow {
                model_id: id,
                latent: c,
                outcomes: v,
                decomposition,
                theorem,
                pinsker,
                delta,
                corollary,
            }
        })
        .collect()
}

fn renormalised(mut p: Vec<f64>) -> Vec<f64> {
    let t: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= t);
    p
}

pub const SWEEP_HEADER: &str =
    "model_id,C,V,eps_prior,eps_sample,L_dist,bound,slack,holds,pinsker_kl,pinsker_half_l1_sq,pinsker_holds,delta,corollary_holds";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 160);
    out.push_str(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let d = &r.decomposition;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.model_id,
            r.latent,
            r.outcomes,
            d.eps_prior,
            d.eps_sample,
            d.l_dist,
            r.theorem.bound,
            r.theorem.slack,
            r.theorem.holds,
            r.pinsker.kl,
            r.pinsker.half_l1_sq,
            r.pinsker.holds,
            r.delta,
            r.corollary
        );
    }
    out
}
