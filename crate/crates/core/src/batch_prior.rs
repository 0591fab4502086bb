//! Batch-level mixture prior built by clustering full-trajectory embeddings.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config, shape, Error, Result};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

/// Pairwise similarity and repulsion scores, both `N x N` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    pub sim: Tensor,
    pub rep: Tensor,
}

/// Soft adjacency and its hard 0.5 threshold (diagonal always set).
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub soft: Tensor,
    pub hard: Vec<Vec<bool>>,
}

/// Clusters listed by ascending smallest member; `assignment[i]` is the cluster of agent `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub clusters: Vec<Vec<usize>>,
    pub assignment: Vec<usize>,
}

impl Partition {
    /// Builds a partition from labels, relabelling clusters by smallest member.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        let mut assignment = Vec::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            let k = *map.entry(*l).or_insert_with(|| {
                clusters.push(Vec::new());
                clusters.len() - 1
            });
            clusters[k].push(i);
            assignment.push(k);
        }
        Self {
            clusters,
            assignment,
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.assignment.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal variance.
    pub var: Vec<f64>,
}

/// Diagonal Gaussian mixture with weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePrior {
    components: Vec<GaussianComponent>,
}

impl MixturePrior {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::Domain("mixture needs at least one component".into()));
        };
        let d = first.mean.len();
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != d || c.var.len() != d {
                return Err(shape("mixture components differ in dimension"));
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::Domain(format!("component weight {} is not positive", c.weight)));
            }
            if c.var.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Domain("component moments must be finite with nonnegative variance".into()));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("mixture weights sum to {total}")));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Raises every variance to at least `floor`.
    pub fn floored(mut self, floor: f64) -> Self {
        for c in &mut self.components {
            for v in &mut c.var {
                *v = v.max(floor);
            }
        }
        self
    }

    /// Means and variances as `K x d` tensors.
    pub fn moments(&self) -> (Tensor, Tensor) {
        let k = self.len();
        let d = self.dim();
        let mut mu = Tensor::zeros(k, d);
        let mut var = Tensor::zeros(k, d);
        for (i, c) in self.components.iter().enumerate() {
            mu.row_slice_mut(i).copy_from_slice(&c.mean);
            var.row_slice_mut(i).copy_from_slice(&c.var);
        }
        (mu, var)
    }
}

/// Mean elementwise products `s_i . s_j / d`, with the diagonals fixed to 1 and 0.
pub fn pair_scores(s: &Tensor, r: &Tensor) -> Result<PairScores> {
    if s.shape() != r.shape() || s.rows() == 0 || s.cols() == 0 {
        return Err(shape(format!("head outputs {:?} and {:?}", s.shape(), r.shape())));
    }
    let d = s.cols() as f64;
    let gram = |x: &Tensor, diag: f64| {
        let mut g = x.matmul(&x.transpose()).map(|v| v / d);
        for i in 0..g.rows() {
            g.set(i, i, diag);
            for j in 0..i {
                g.set(i, j, g.get(j, i));
            }
        }
        g
    };
    Ok(PairScores {
        sim: gram(s, 1.0),
        rep: gram(r, 0.0),
    })
}

pub fn build_adjacency(scores: &PairScores, theta_sim: f64, theta_rep: f64, tau_sim: f64, tau_rep: f64) -> Result<Adjacency> {
    if !(tau_sim > 0.0) || !(tau_rep > 0.0) {
        return Err(config("adjacency temperatures must be positive"));
    }
    let soft = scores
        .sim
        .zip_map(&scores.rep, |s, r| sigmoid((s - theta_sim) / tau_sim) * sigmoid((theta_rep - r) / tau_rep));
    let n = soft.rows();
    let hard = (0..n)
        .map(|i| (0..n).map(|j| i == j || soft.get(i, j) > 0.5).collect())
        .collect();
    Ok(Adjacency { soft, hard })
}

/// Undirected connected components by breadth-first search.
pub fn connected_components(adj: &[Vec<bool>]) -> Result<Partition> {
    let n = adj.len();
    for (i, row) in adj.iter().enumerate() {
        if row.len() != n {
            return Err(shape("adjacency must be square"));
        }
        for j in 0..n {
            if row[j] != adj[j][i] {
                return Err(Error::Contract(format!("adjacency is asymmetric at ({i}, {j})")));
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut clusters = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let k = clusters.len();
        let mut members = vec![start];
        label[start] = k;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if adj[i][j] && label[j] == usize::MAX {
                    label[j] = k;
                    members.push(j);
                    queue.push_back(j);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    Ok(Partition {
        clusters,
        assignment: label,
    })
}

/// Per-cluster weights, means and unbiased variances (divisor `max(n - 1, 1)`),
/// without any variance floor.
pub fn estimate_batch_gmm(f: &Tensor, partition: &Partition) -> Result<MixturePrior> {
    if partition.is_empty() {
        return Err(Error::Domain("empty partition".into()));
    }
    let n = f.rows();
    if partition.n_agents() != n {
        return Err(shape(format!("partition covers {} agents, embeddings have {n}", partition.n_agents())));
    }
    let mut seen = vec![false; n];
    for c in &partition.clusters {
        for &i in c {
            if i >= n || seen[i] {
                return Err(Error::Domain("partition must cover every agent exactly once".into()));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Domain("partition must cover every agent exactly once".into()));
    }
    let d = f.cols();
    let comps = partition
        .clusters
        .iter()
        .map(|members| {
            let nk = members.len() as f64;
            let mut mean = vec![0.0; d];
            for &i in members {
                for (m, x) in mean.iter_mut().zip(f.row_slice(i)) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; d];
            for &i in members {
                for ((v, x), m) in var.iter_mut().zip(f.row_slice(i)).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            let div = (nk - 1.0).max(1.0);
            var.iter_mut().for_each(|v| *v /= div);
            GaussianComponent {
                weight: nk / n as f64,
                mean,
                var,
            }
        })
        .collect();
    MixturePrior::new(comps)
}

/// Reparameterised draw from the component assigned to `agent`.
pub fn sample_batch_prior<R: Rng + ?Sized>(
    prior: &MixturePrior,
    partition: &Partition,
    agent: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let k = *partition
        .assignment
        .get(agent)
        .ok_or_else(|| Error::Domain(format!("agent {agent} has no cluster")))?;
    let c = prior
        .components
        .get(k)
        .ok_or_else(|| Error::Domain(format!("cluster {k} has no component")))?;
    Ok(c.mean
        .iter()
        .zip(&c.var)
        .map(|(m, v)| {
            let e: f64 = rng.sample(StandardNormal);
            m + v.sqrt() * e
        })
        .collect())
}

fn matrix_csv(t: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..t.rows() {
        let row: Vec<String> = t.row_slice(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes `sim.csv`, `rep.csv`, `soft_adj.csv`, `hard_adj.csv` and `partition.csv` into `dir`.
pub fn dump_debug(dir: &Path, scores: &PairScores, adj: &Adjacency, partition: &Partition) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("sim.csv"), matrix_csv(&scores.sim))?;
    fs::write(dir.join("rep.csv"), matrix_csv(&scores.rep))?;
    fs::write(dir.join("soft_adj.csv"), matrix_csv(&adj.soft))?;
    let mut hard = String::new();
    for row in &adj.hard {
        let r: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
        hard.push_str(&r.join(","));
        hard.push('\n');
    }
    fs::write(dir.join("hard_adj.csv"), hard)?;
    let mut part = String::from("agent,cluster\n");
    for (i, k) in partition.assignment.iter().enumerate() {
        let _ = writeln!(part, "{i},{k}");
    }
    fs::write(dir.join("partition.csv"), part)?;
    Ok(())
}

/// Differentiable pair scores on the tape.
pub fn pair_scores_var(t: &Tape, s: Var, r: Var) -> (Var, Var) {
    let (n, d) = t.shape(s);
    let gram = |x: Var, diag: f64| {
        let raw = t.matmul(x, t.transpose(x));
        let g = t.scale(t.add(raw, t.transpose(raw)), 0.5 / d as f64);
        let mut keep = Tensor::filled(n, n, 1.0);
        let mut fixed = Tensor::zeros(n, n);
        for i in 0..n {
            keep.set(i, i, 0.0);
            fixed.set(i, i, diag);
        }
        t.add(t.mul(g, t.constant(keep)), t.constant(fixed))
    };
    (gram(s, 1.0), gram(r, 0.0))
}

/// Differentiable soft adjacency; `theta_sim` and `theta_rep` are 1x1 nodes.
pub fn soft_adjacency_var(t: &Tape, sim: Var, rep: Var, theta_sim: Var, theta_rep: Var, tau: f64) -> Var {
    let n = t.shape(sim).0;
    let ones_col = t.constant(Tensor::filled(n, 1, 1.0));
    let ones_row = t.constant(Tensor::filled(1, n, 1.0));
    // n x n broadcast of a scalar node
    let spread = |x: Var| t.matmul(t.matmul(ones_col, x), ones_row);
    let a = t.sigmoid(t.scale(t.sub(sim, spread(theta_sim)), 1.0 / tau));
    let b = t.sigmoid(t.scale(t.sub(spread(theta_rep), rep), 1.0 / tau));
    t.mul(a, b)
}

/// Per-agent cluster moments with a straight-through pass over the soft adjacency.
///
/// Pair weights are `mask + soft - detach(soft)`: forward they equal the hard
/// same-cluster mask, backward they carry the gradient of the soft adjacency.
/// Returns `(mean, var)`, each `N x d`; row `i` holds the moments of agent
/// `i`'s cluster, variance floored at `floor`.
pub fn cluster_moments_var(t: &Tape, f: Var, soft_adj: Var, partition: &Partition, floor: f64) -> (Var, Var) {
    let n = partition.n_agents();
    let mut mask = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if partition.assignment[i] == partition.assignment[j] {
                mask.set(i, j, 1.0);
            }
        }
    }
    let w = t.add(t.constant(mask), t.sub(soft_adj, t.detach(soft_adj)));
    let count = t.sum_rows(w);
    let mean = t.div_col(t.matmul(w, f), count);
    let second = t.matmul(w, t.square(f));
    let spread = t.sub(second, t.mul_col(t.square(mean), count));
    let divisor = t.clamp_min(t.shift(count, -1.0), 1.0);
    let var = t.clamp_min(t.div_col(spread, divisor), floor);
    (mean, var)
}

/// Cluster-level rows (first member of each cluster) of per-agent moments.
pub fn cluster_rows(partition: &Partition) -> Vec<usize> {
    partition.clusters.iter().map(|c| c[0]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_adjacency_is_quarter() {
        let s = PairScores {
            sim: Tensor::filled(1, 1, 0.7),
            rep: Tensor::filled(1, 1, 0.3),
        };
        let a = build_adjacency(&s, 0.7, 0.3, 0.1, 0.1).unwrap();
        assert!((a.soft.get(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_temperature_is_config_error() {
        let s = PairScores {
            sim: Tensor::identity(2),
            rep: Tensor::zeros(2, 2),
        };
        assert!(matches!(build_adjacency(&s, 0.7, 0.3, 0.0, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn identity_gives_singletons() {
        let a: Vec<Vec<bool>> = (0..4).map(|i| (0..4).map(|j| i == j).collect()).collect();
        let p = connected_components(&a).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.assignment, vec![0, 1, 2, 3]);
    }

    #[test]
    fn chain_is_one_cluster() {
        let mut a = vec![vec![false; 3]; 3];
        for i in 0..3 {
            a[i][i] = true;
        }
        for (i, j) in [(0, 1), (1, 2)] {
            a[i][j] = true;
            a[j][i] = true;
        }
        let p = connected_components(&a).unwrap();
        assert_eq!(p.clusters, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn asymmetric_is_contract_error() {
        let a = vec![vec![true, true], vec![false, true]];
        assert!(matches!(connected_components(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_variance_sample_is_mean() {
        let p = MixturePrior::new(vec![GaussianComponent {
            weight: 1.0,
            mean: vec![1.5, -2.0],
            var: vec![0.0, 0.0],
        }])
        .unwrap();
        let part = Partition::from_labels(&[0]);
        let mut rng = rand::rng();
        assert_eq!(sample_batch_prior(&p, &part, 0, &mut rng).unwrap(), vec![1.5, -2.0]);
        assert!(matches!(sample_batch_prior(&p, &part, 1, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn ste_moments_match_hard_estimate() {
        let t = Tape::new();
        let f = Tensor::from_vec(4, 2, vec![0.0, 0.0, 2.0, 0.0, 5.0, 1.0, 1.0, 1.0]).unwrap();
        let part = Partition::from_labels(&[0, 0, 1, 0]);
        let fv = t.leaf(f.clone());
        let soft = t.leaf(Tensor::filled(4, 4, 0.3));
        let (mu, var) = cluster_moments_var(&t, fv, soft, &part, 1e-4);
        let gmm = estimate_batch_gmm(&f, &part).unwrap().floored(1e-4);
        let mu = t.value(mu);
        let var = t.value(var);
        for (i, &k) in part.assignment.iter().enumerate() {
            let c = &gmm.components()[k];
            for j in 0..2 {
                assert!((mu.get(i, j) - c.mean[j]).abs() < 1e-12);
                assert!((var.get(i, j) - c.var[j]).abs() < 1e-12);
            }
        }
    }
}
