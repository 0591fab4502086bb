//! Joint objective, AdamW stepping, inference and evaluation.

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch_prior::{cluster_moments_var, cluster_rows, connected_components, pair_scores_var, soft_adjacency_var};
use crate::error::{config, Error, Result};
use crate::global_prior::{gumbel_tensor, normal_tensor, sample_global_hard_var, sample_global_var, Selection};
use crate::nets::{to_absolute, Graph, Model, ModelConfig, ParamGrads, ParamStore};
use crate::ot::{distill_loss_var, w2_cost_var};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::traj::{min_of_n, Batch, Point, PredictionSet, Scene};

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoLb,
    NoLg,
    NoDistill,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoLb, Variant::NoLg, Variant::NoDistill];

    pub fn uses_batch_loss(self) -> bool {
        self != Variant::NoLb
    }

    pub fn uses_global_loss(self) -> bool {
        self != Variant::NoLg
    }

    pub fn uses_distill(self) -> bool {
        self != Variant::NoDistill
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLb => "no_lb",
            Variant::NoLg => "no_lg",
            Variant::NoDistill => "no_distill",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Samples per agent in both losses and at evaluation.
    pub n_samples: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub tau_threshold: f64,
    pub tau_gumbel: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Scenes per batch.
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Component selection for global sampling at inference.
    pub selection: Selection,
    /// Detach the batch mixture inside the distillation term.
    pub detach_batch_in_distill: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            n_samples: 20,
            lambda: 0.1,
            epsilon: 0.1,
            sinkhorn_iters: 20,
            tau_threshold: 0.1,
            tau_gumbel: 1.0,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            variant: Variant::Full,
            selection: Selection::Soft,
            detach_batch_in_distill: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n_samples == 0 || self.batch_size == 0 || self.sinkhorn_iters == 0 {
            return Err(config("n_samples, batch_size and sinkhorn_iters must be positive"));
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("tau_threshold", self.tau_threshold),
            ("tau_gumbel", self.tau_gumbel),
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config(format!("{name} must be positive")));
            }
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(config("lambda and weight_decay must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config("adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Distillation weight after applying the variant.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.uses_distill() {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Loss values of one step; disabled terms are reported as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_b: f64,
    pub l_g: f64,
    pub l_distill: f64,
    pub lambda: f64,
    pub l_total: f64,
    /// Batch mixture size.
    pub n_patterns: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_b, self.l_g, self.l_distill, self.l_total].iter().all(|v| v.is_finite())
    }
}

struct Agents<'a> {
    observed: Vec<&'a [Point]>,
    future: Vec<&'a [Point]>,
    groups: Vec<usize>,
    scene_ids: Vec<u64>,
}

impl<'a> Agents<'a> {
    fn gather(batch: &Batch<'a>) -> Self {
        let mut a = Agents {
            observed: Vec::new(),
            future: Vec::new(),
            groups: Vec::new(),
            scene_ids: Vec::new(),
        };
        for (s, pair) in batch.agents() {
            a.observed.push(&pair.observed);
            a.future.push(&pair.future);
            a.groups.push(s);
            a.scene_ids.push(batch.scenes()[s].scene_id);
        }
        a
    }
}

/// Future displacements from the last observed point, each row repeated `n` times.
fn target_offsets(agents: &Agents<'_>, n: usize, t_pred: usize) -> Tensor {
    let m = agents.observed.len();
    let mut t = Tensor::zeros(m * n, 2 * t_pred);
    for i in 0..m {
        let o = agents.observed[i][agents.observed[i].len() - 1];
        for s in 0..n {
            let row = t.row_slice_mut(i * n + s);
            for (k, p) in agents.future[i].iter().enumerate() {
                row[2 * k] = p[0] - o[0];
                row[2 * k + 1] = p[1] - o[1];
            }
        }
    }
    t
}

fn repeat_index(m: usize, n: usize) -> Vec<usize> {
    (0..m).flat_map(|i| std::iter::repeat_n(i, n)).collect()
}

/// Mean over agents of the smallest ADE among each agent's `n` decoded rows.
pub fn best_of_n_ade(t: &Tape, pred: Var, target: &Tensor, n: usize, t_pred: usize) -> Var {
    let rows = t.shape(pred).0;
    let m = rows / n;
    let diff = t.sub(pred, t.constant(target.clone()));
    let dist = t.row_norm(t.reshape(diff, rows * t_pred, 2));
    let ade = t.scale(t.sum_rows(t.reshape(dist, rows, t_pred)), 1.0 / t_pred as f64);
    t.mean(t.min_rows(t.reshape(ade, m, n)))
}

struct Forward {
    report: LossReport,
    total: Var,
}

fn forward(model: &Model, g: &Graph, batch: &Batch<'_>, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Forward> {
    let t = &g.tape;
    let agents = Agents::gather(batch);
    let m = agents.observed.len();
    let n = cfg.n_samples;
    let d = model.latent_dim();
    let t_pred = model.cfg.t_pred;
    let variant = cfg.variant;
    let lambda = cfg.effective_lambda();

    let f_past = model.encode_past(g, &agents.observed, &agents.groups)?;
    let target = target_offsets(&agents, n, t_pred);
    let f_rep = t.gather_rows(f_past, &repeat_index(m, n));

    let need_batch = variant.uses_batch_loss() || variant.uses_distill();
    let mut batch_side = None;
    if need_batch {
        let f_full = model.encode_full(g, &agents.observed, &agents.future, &agents.groups)?;
        let (s, r) = model.project_heads(g, f_full);
        let (sim, rep) = pair_scores_var(t, s, r);
        let (th_sim, th_rep) = model.thresholds(g);
        let soft = soft_adjacency_var(t, sim, rep, th_sim, th_rep, cfg.tau_threshold);
        let hard = {
            let sv = t.value_ref(soft);
            (0..m)
                .map(|i| (0..m).map(|j| i == j || sv.get(i.min(j), i.max(j)) > 0.5).collect::<Vec<bool>>())
                .collect::<Vec<_>>()
        };
        let partition = connected_components(&hard)?;
        let (mu, var) = cluster_moments_var(t, f_full, soft, &partition, model.cfg.var_floor);
        batch_side = Some((partition, mu, var));
    }

    let mut l_b = None;
    if variant.uses_batch_loss() {
        let (_, mu, var) = batch_side.as_ref().expect("batch side computed");
        let idx = repeat_index(m, n);
        let eps = normal_tensor(rng, m * n, d);
        let codes = t.add(t.gather_rows(*mu, &idx), t.mul(t.sqrt(t.gather_rows(*var, &idx)), t.constant(eps)));
        let pred = model.decode(g, f_rep, codes)?;
        l_b = Some(best_of_n_ade(t, pred, &target, n, t_pred));
    }

    let need_global = variant.uses_global_loss() || variant.uses_distill();
    let mut l_g = None;
    let mut l_d = None;
    if need_global {
        let (gmu, gvar, gpi) = model.global_gmm(g);
        let attn = model.cross_attention(g, f_past, gmu, gvar, gpi)?;
        if variant.uses_global_loss() {
            let k = model.cfg.k_global;
            let gumbel = gumbel_tensor(rng, m * n, k);
            let eps = normal_tensor(rng, m * n, d);
            let codes = sample_global_var(t, attn, gmu, gvar, &gumbel, &eps, n, cfg.tau_gumbel);
            let codes = refine_per_agent(model, g, codes, m, n);
            let pred = model.decode(g, f_rep, codes)?;
            l_g = Some(best_of_n_ade(t, pred, &target, n, t_pred));
        }
        if variant.uses_distill() {
            let (partition, mu, var) = batch_side.as_ref().expect("batch side computed");
            let rows = cluster_rows(partition);
            let (mut bmu, mut bvar) = (t.gather_rows(*mu, &rows), t.gather_rows(*var, &rows));
            if cfg.detach_batch_in_distill {
                bmu = t.detach(bmu);
                bvar = t.detach(bvar);
            }
            let a_bar = t.transpose(t.scale(t.sum_cols(attn), 1.0 / m as f64));
            let beta: Vec<f64> = partition.clusters.iter().map(|c| c.len() as f64 / m as f64).collect();
            let cost = w2_cost_var(t, gmu, gvar, bmu, bvar);
            l_d = Some(distill_loss_var(t, cost, a_bar, &beta, cfg.epsilon, cfg.sinkhorn_iters));
        }
    }

    let zero = t.constant(Tensor::scalar(0.0));
    let lb = l_b.unwrap_or(zero);
    let lg = l_g.unwrap_or(zero);
    let ld = l_d.unwrap_or(zero);
    let total = t.add(t.add(lb, lg), t.scale(ld, lambda));
    let report = LossReport {
        l_b: t.item(lb),
        l_g: t.item(lg),
        l_distill: t.item(ld),
        lambda,
        l_total: t.item(total),
        n_patterns: batch_side.as_ref().map_or(0, |b| b.0.len()),
    };
    if !report.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {report:?} on scenes {:?}",
            dedup(&agents.scene_ids)
        )));
    }
    Ok(Forward { report, total })
}

fn dedup(ids: &[u64]) -> Vec<u64> {
    let mut v = ids.to_vec();
    v.dedup();
    v
}

fn refine_per_agent(model: &Model, g: &Graph, codes: Var, m: usize, n: usize) -> Var {
    if model.refine.is_none() {
        return codes;
    }
    let parts: Vec<Var> = (0..m)
        .map(|i| model.refine_samples(g, g.tape.slice_rows(codes, i * n, n)))
        .collect();
    g.tape.concat_rows(&parts)
}

/// Forward and backward pass without updating parameters.
pub fn compute_gradients(
    model: &Model,
    store: &ParamStore,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossReport, ParamGrads)> {
    let g = Graph::new(store);
    let fwd = forward(model, &g, batch, cfg, rng)?;
    let grads = g.backward(fwd.total);
    Ok((fwd.report, grads))
}

/// Loss of one batch under fixed noise, without gradients.
pub fn evaluate_loss(model: &Model, store: &ParamStore, batch: &Batch<'_>, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<LossReport> {
    let g = Graph::frozen(store);
    Ok(forward(model, &g, batch, cfg, rng)?.report)
}

/// AdamW with decoupled weight decay on parameters flagged for decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let decay = store.decays(id);
            let k = id.0;
            let (value, grad) = store.value_and_grad_mut(id);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.adam_eps);
                if decay {
                    *p -= cfg.lr * cfg.weight_decay * *p;
                }
                *p -= cfg.lr * upd;
            }
        }
    }
}

/// One optimisation step on `batch`.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let (report, grads) = compute_gradients(model, store, batch, cfg, rng)?;
    store.zero_grad();
    store.accumulate(&grads);
    for id in store.ids() {
        if !store.grad(id).is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of {} after loss {report:?}",
                store.name(id)
            )));
        }
    }
    opt.step(store, cfg);
    Ok(report)
}

/// Per-epoch means of the training losses with optional validation metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_b: f64,
    pub l_g: f64,
    pub l_distill: f64,
    pub l_total: f64,
    pub val_made: Option<f64>,
    pub val_mfde: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,L_B,L_G,L_distill,L_total,val_mADE_N,val_mFDE_N";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.l_b,
            self.l_g,
            self.l_distill,
            self.l_total,
            opt(self.val_made),
            opt(self.val_mfde)
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub epochs: Vec<EpochMetrics>,
    /// Every step's report, in order.
    pub steps: Vec<LossReport>,
}

/// Trains from a fresh initialisation for `cfg.epochs` epochs.
///
/// Scenes are shuffled each epoch and consumed `batch_size` at a time.
/// `on_epoch` observes each epoch's metrics as soon as they are available.
pub fn fit(
    train: &[Scene],
    val: &[Scene],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Trained> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("no training scenes".into()));
    }
    let window = cfg.model.window();
    for s in train.iter().chain(val) {
        s.check_window(window)?;
    }
    let (model, mut store) = Model::init(cfg.model.clone())?;
    let mut opt = AdamW::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut buf: Vec<Scene> = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            buf.clear();
            buf.extend(chunk.iter().map(|&i| train[i].clone()));
            let batch = Batch::new(&buf)?;
            let r = train_step(&model, &mut store, &mut opt, &batch, cfg, &mut rng)?;
            debug!("epoch {epoch} step {count}: {r:?}");
            sums[0] += r.l_b;
            sums[1] += r.l_g;
            sums[2] += r.l_distill;
            sums[3] += r.l_total;
            count += 1;
            steps.push(r);
        }
        let c = count as f64;
        let (val_made, val_mfde) = if val.is_empty() {
            (None, None)
        } else {
            let eval = evaluate(&model, &store, val, cfg, &[cfg.n_samples], cfg.seed ^ 0x5eed)?;
            (Some(eval.by_k[0].made), Some(eval.by_k[0].mfde))
        };
        let row = EpochMetrics {
            epoch,
            l_b: sums[0] / c,
            l_g: sums[1] / c,
            l_distill: sums[2] / c,
            l_total: sums[3] / c,
            val_made,
            val_mfde,
        };
        info!("{}", row.csv_row());
        on_epoch(&row);
        epochs.push(row);
    }
    Ok(Trained {
        model,
        store,
        epochs,
        steps,
    })
}

const INFER_CHUNK: usize = 32;

/// Samples `n` futures per agent from the global prior.
///
/// `scenes[s][a]` is the observed track of agent `a` in scene `s`; futures are
/// never consulted. Returns predictions in the same nesting.
pub fn infer(
    model: &Model,
    store: &ParamStore,
    scenes: &[Vec<Vec<Point>>],
    n: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<PredictionSet>>> {
    if n == 0 {
        return Err(config("sample count must be positive"));
    }
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(INFER_CHUNK) {
        let g = Graph::frozen(store);
        let t = &g.tape;
        let mut observed: Vec<&[Point]> = Vec::new();
        let mut groups = Vec::new();
        for (s, scene) in chunk.iter().enumerate() {
            if scene.is_empty() {
                return Err(Error::Domain("scene without agents".into()));
            }
            for track in scene {
                observed.push(track);
                groups.push(s);
            }
        }
        let m = observed.len();
        let d = model.latent_dim();
        let f_past = model.encode_past(&g, &observed, &groups)?;
        let (gmu, gvar, gpi) = model.global_gmm(&g);
        let attn = model.cross_attention(&g, f_past, gmu, gvar, gpi)?;
        let gumbel = gumbel_tensor(rng, m * n, model.cfg.k_global);
        let eps = normal_tensor(rng, m * n, d);
        let codes = match cfg.selection {
            Selection::Soft => sample_global_var(t, attn, gmu, gvar, &gumbel, &eps, n, cfg.tau_gumbel),
            Selection::Hard => sample_global_hard_var(t, attn, gmu, gvar, &gumbel, &eps, n),
        };
        let codes = refine_per_agent(model, &g, codes, m, n);
        let f_rep = t.gather_rows(f_past, &repeat_index(m, n));
        let pred = t.value(model.decode(&g, f_rep, codes)?);
        let mut i = 0;
        for scene in chunk {
            let mut sets = Vec::with_capacity(scene.len());
            for track in scene {
                let origin = track[track.len() - 1];
                let samples = (0..n).map(|s| to_absolute(pred.row_slice(i * n + s), origin)).collect();
                sets.push(PredictionSet::new(samples)?);
                i += 1;
            }
            out.push(sets);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub made: f64,
    pub mfde: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Metrics for each requested `k`, all computed on prefixes of one draw.
    pub by_k: Vec<KMetrics>,
    pub predictions: Vec<Vec<PredictionSet>>,
}

/// Min-of-K ADE/FDE averaged over agents.
///
/// One draw of `max(ks)` samples per agent is taken and every `k` uses its
/// first `k` samples, so the curve over `k` is nonincreasing.
pub fn evaluate(model: &Model, store: &ParamStore, scenes: &[Scene], cfg: &TrainConfig, ks: &[usize], seed: u64) -> Result<Evaluation> {
    let n = ks.iter().copied().max().ok_or_else(|| config("no sample counts requested"))?;
    let observed: Vec<Vec<Vec<Point>>> = scenes
        .iter()
        .map(|s| s.agents.iter().map(|a| a.observed.clone()).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let predictions = infer(model, store, &observed, n, cfg, &mut rng)?;
    let by_k = ks
        .iter()
        .map(|&k| {
            let (mut ade, mut fde, mut count) = (0.0, 0.0, 0usize);
            for (scene, preds) in scenes.iter().zip(&predictions) {
                for (agent, p) in scene.agents.iter().zip(preds) {
                    let r = min_of_n(&p.truncated(k)?, &agent.future)?;
                    ade += r.min_ade;
                    fde += r.min_fde;
                    count += 1;
                }
            }
            Ok(KMetrics {
                k,
                made: ade / count as f64,
                mfde: fde / count as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { by_k, predictions })
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub made: f64,
    pub mfde: f64,
    pub final_loss: LossReport,
}

/// Trains each variant under the same seed and data and evaluates it on `test`.
pub fn ablate(train: &[Scene], test: &[Scene], cfg: &TrainConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let c = TrainConfig {
                variant,
                ..cfg.clone()
            };
            let trained = fit(train, &[], &c, |_| {})?;
            let eval = evaluate(&trained.model, &trained.store, test, &c, &[c.n_samples], c.seed ^ 0xe7a1)?;
            Ok(AblationRow {
                variant,
                made: eval.by_k[0].made,
                mfde: eval.by_k[0].mfde,
                final_loss: trained.steps.last().copied().unwrap_or_default(),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,mADE,mFDE\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.variant.name(), r.made, r.mfde);
    }
    out
}
