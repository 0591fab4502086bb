//! Trainable global mixture, per-agent conditioning and Gumbel-softmax sampling.

use std::fmt::Write as _;

use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch_prior::{GaussianComponent, MixturePrior};
use crate::error::{shape, Error, Result};
use crate::nets::{Graph, Model, ParamStore};
use crate::simplex::{logsumexp, softmax};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How a component is chosen when sampling the global prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Gumbel-softmax mixture of component draws at the configured temperature.
    Soft,
    /// Gumbel-max: one component per draw.
    Hard,
}

/// Attention weights of one agent over the global components.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedPrior {
    weights: Vec<f64>,
}

impl ConditionedPrior {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("attention weights sum to {total}")));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Reads the global mixture (weights, means, floored variances) out of the store.
pub fn global_mixture(model: &Model, store: &ParamStore) -> Result<MixturePrior> {
    let floor = model.cfg.var_floor;
    let mu = store.value(model.gmm_mu);
    let rho = store.value(model.gmm_rho);
    let pi = softmax(store.value(model.gmm_logit).data());
    let comps = (0..mu.rows())
        .map(|g| GaussianComponent {
            weight: pi[g],
            mean: mu.row_slice(g).to_vec(),
            var: rho.row_slice(g).iter().map(|&r| floor + crate::tape::softplus(r)).collect(),
        })
        .collect();
    MixturePrior::new(comps)
}

/// Attention of every row of `f_past` over the global components.
pub fn condition(model: &Model, store: &ParamStore, f_past: &Tensor) -> Result<Vec<ConditionedPrior>> {
    let g = Graph::frozen(store);
    let f = g.tape.constant(f_past.clone());
    let (mu, var, pi) = model.global_gmm(&g);
    let a = g.tape.value(model.cross_attention(&g, f, mu, var, pi)?);
    (0..a.rows()).map(|i| ConditionedPrior::new(a.row_slice(i).to_vec())).collect()
}

fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((log a + G) / tau)` with zero-weight components pinned to zero.
pub fn gumbel_select_with(a: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config("gumbel temperature must be positive".into()));
    }
    if a.len() != noise.len() {
        return Err(shape("gumbel noise width"));
    }
    if !a.iter().any(|&w| w > 0.0) {
        return Err(Error::Domain("all selection weights are zero".into()));
    }
    let logits: Vec<f64> = a
        .iter()
        .zip(noise)
        .map(|(&w, &g)| if w > 0.0 { (w.ln() + g) / tau } else { f64::NEG_INFINITY })
        .collect();
    Ok(softmax(&logits))
}

pub fn gumbel_select<R: Rng + ?Sized>(a: &[f64], tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    let noise = gumbel_noise(rng, a.len());
    gumbel_select_with(a, &noise, tau)
}

/// One latent code from the conditioned prior.
pub fn sample_global<R: Rng + ?Sized>(
    prior: &ConditionedPrior,
    gmm: &MixturePrior,
    tau: f64,
    selection: Selection,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if prior.weights.len() != gmm.len() {
        return Err(shape("attention width does not match the mixture"));
    }
    let noise = gumbel_noise(rng, gmm.len());
    let d = gmm.dim();
    let sel = match selection {
        Selection::Soft => gumbel_select_with(&prior.weights, &noise, tau)?,
        Selection::Hard => {
            let logits: Vec<f64> = prior
                .weights
                .iter()
                .zip(&noise)
                .map(|(&w, &g)| if w > 0.0 { w.ln() + g } else { f64::NEG_INFINITY })
                .collect();
            let k = argmax(&logits);
            let mut one = vec![0.0; gmm.len()];
            one[k] = 1.0;
            one
        }
    };
    let mut z = vec![0.0; d];
    for (c, &w) in gmm.components().iter().zip(&sel) {
        if w == 0.0 {
            continue;
        }
        for i in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            z[i] += w * (c.mean[i] + c.var[i].sqrt() * e);
        }
    }
    Ok(z)
}

pub(crate) fn argmax(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

/// `log sum_g a_g N(z; mu_g, diag var_g)`.
pub fn log_density(prior: &ConditionedPrior, gmm: &MixturePrior, z: &[f64]) -> Result<f64> {
    if z.len() != gmm.dim() || prior.weights.len() != gmm.len() {
        return Err(shape("density argument does not match the mixture"));
    }
    let terms: Vec<f64> = gmm
        .components()
        .iter()
        .zip(&prior.weights)
        .map(|(c, &a)| {
            if a == 0.0 {
                return f64::NEG_INFINITY;
            }
            let mut lp = a.ln();
            for i in 0..z.len() {
                let v = c.var[i];
                let r = z[i] - c.mean[i];
                lp += -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + r * r / v);
            }
            lp
        })
        .collect();
    Ok(logsumexp(&terms))
}

/// One row per component: `g, weight, mean[0..d), var[0..d)`.
pub fn mixture_to_csv(gmm: &MixturePrior) -> String {
    let d = gmm.dim();
    let mut out = String::from("g,weight");
    for i in 0..d {
        let _ = write!(out, ",mu{i}");
    }
    for i in 0..d {
        let _ = write!(out, ",var{i}");
    }
    out.push('\n');
    for (g, c) in gmm.components().iter().enumerate() {
        let _ = write!(out, "{g},{}", c.weight);
        for v in c.mean.iter().chain(&c.var) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn mixture_from_csv(text: &str) -> Result<MixturePrior> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: "<gmm csv>".into(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let cols = header.split(',').count();
    if cols < 4 || (cols - 2) % 2 != 0 {
        return Err(parse_err(1, "malformed header".into()));
    }
    let d = (cols - 2) / 2;
    let mut comps = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(ln + 1, e.to_string()))?;
        if vals.len() != cols {
            return Err(parse_err(ln + 1, format!("expected {cols} fields")));
        }
        comps.push(GaussianComponent {
            weight: vals[1],
            mean: vals[2..2 + d].to_vec(),
            var: vals[2 + d..].to_vec(),
        });
    }
    MixturePrior::new(comps)
}

/// Differentiable global draws.
///
/// `attn` is `M x K`; `gumbel` holds `M * n` rows of Gumbel noise and `eps`
/// `M * n` rows of standard normal noise. Row `i * n + s` of the result is the
/// `s`-th code of agent `i`. The soft mixture `sum_g w_g (mu_g + sigma_g eps_g)`
/// with independent `eps_g` is drawn in the equivalent collapsed form
/// `W mu + sqrt(W^2 var) * eps`.
#[allow(clippy::too_many_arguments)]
pub fn sample_global_var(
    t: &Tape,
    attn: Var,
    mu: Var,
    var: Var,
    gumbel: &Tensor,
    eps: &Tensor,
    n: usize,
    tau: f64,
) -> Var {
    let m = t.shape(attn).0;
    let rows: Vec<Var> = (0..m)
        .map(|i| {
            let noise = Tensor::from_vec(n, gumbel.cols(), gumbel.data()[i * n * gumbel.cols()..(i + 1) * n * gumbel.cols()].to_vec())
                .expect("noise block");
            t.gumbel_softmax(t.slice_rows(attn, i, 1), &noise, tau)
        })
        .collect();
    let w = t.concat_rows(&rows);
    let mean = t.matmul(w, mu);
    let sd = t.sqrt(t.matmul(t.square(w), var));
    t.add(mean, t.mul(sd, t.constant(eps.clone())))
}

/// Differentiable hard-selection draws: `mu_k + sigma_k eps` with `k` chosen by Gumbel-max.
pub fn sample_global_hard_var(t: &Tape, attn: Var, mu: Var, var: Var, gumbel: &Tensor, eps: &Tensor, n: usize) -> Var {
    let a = t.value(attn);
    let mut idx = Vec::with_capacity(a.rows() * n);
    for i in 0..a.rows() {
        for s in 0..n {
            let logits: Vec<f64> = a
                .row_slice(i)
                .iter()
                .zip(gumbel.row_slice(i * n + s))
                .map(|(&w, &g)| if w > 0.0 { w.ln() + g } else { f64::NEG_INFINITY })
                .collect();
            idx.push(argmax(&logits));
        }
    }
    let m = t.gather_rows(mu, &idx);
    let sd = t.sqrt(t.gather_rows(var, &idx));
    t.add(m, t.mul(sd, t.constant(eps.clone())))
}

/// Gumbel noise tensor of shape `rows x cols`.
pub fn gumbel_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, gumbel_noise(rng, rows * cols)).expect("sized")
}

/// Standard normal tensor of shape `rows x cols`.
pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).expect("sized")
}
