use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::params::{Graph, ParamId, ParamStore};
use crate::error::{config, shape, Error, Result};
use crate::tape::{softplus_inv, Var};
use crate::tensor::Tensor;
use crate::traj::{Point, Window};

/// Normalisation applied to cross-attention scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    Entmax15,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    /// Width of every embedding and latent code.
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    pub head_hidden: usize,
    /// Number of global mixture components.
    pub k_global: usize,
    pub attention: AttentionNorm,
    /// Multi-head self-attention over the sampled latent codes.
    pub refine: bool,
    pub refine_heads: usize,
    /// Inner width of the refinement attention; `0` means `20 * latent_dim`.
    pub refine_dim: usize,
    /// Elementwise lower bound on every mixture variance.
    pub var_floor: f64,
    pub theta_sim: f64,
    pub theta_rep: f64,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_obs: 8,
            t_pred: 12,
            latent_dim: 32,
            decoder_hidden: 128,
            head_hidden: 32,
            k_global: 100,
            attention: AttentionNorm::Entmax15,
            refine: false,
            refine_heads: 4,
            refine_dim: 0,
            var_floor: 1e-4,
            theta_sim: 0.7,
            theta_rep: 0.3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn window(&self) -> Window {
        Window {
            t_obs: self.t_obs,
            t_pred: self.t_pred,
        }
    }

    pub fn refine_width(&self) -> usize {
        if self.refine_dim == 0 {
            20 * self.latent_dim
        } else {
            self.refine_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_obs < 1 || self.t_pred < 1 || self.latent_dim < 1 || self.k_global < 1 {
            return Err(config("horizons, latent_dim and k_global must be positive"));
        }
        if self.decoder_hidden < 1 || self.head_hidden < 1 {
            return Err(config("hidden widths must be positive"));
        }
        if self.refine && (self.refine_heads == 0 || self.refine_width() % self.refine_heads != 0) {
            return Err(config("refine width must be divisible by refine_heads"));
        }
        if !(self.var_floor > 0.0) {
            return Err(config("var_floor must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform(f64),
    Zeros,
    Const(f64),
    StdNormal,
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
    decay: bool,
}

fn layout(cfg: &ModelConfig) -> Vec<Spec> {
    let d = cfg.latent_dim;
    let mut specs = Vec::new();
    let mut w = |name: String, rows: usize, cols: usize| {
        specs.push(Spec {
            name,
            rows,
            cols,
            init: Init::Uniform((1.0 / rows as f64).sqrt()),
            decay: true,
        });
    };
    for enc in ["past", "full"] {
        w(format!("{enc}.conv.w"), 6, d);
        w(format!("{enc}.gru.wx"), d, 3 * d);
        w(format!("{enc}.gru.wh"), d, 3 * d);
        w(format!("{enc}.att.q"), d, d);
        w(format!("{enc}.att.k"), d, d);
        w(format!("{enc}.att.v"), d, d);
    }
    for head in ["sim", "rep"] {
        w(format!("{head}.l1.w"), d, cfg.head_hidden);
        w(format!("{head}.l2.w"), cfg.head_hidden, d);
    }
    w("xattn.q".into(), d, d);
    w("xattn.k".into(), 2 * d + 1, d);
    w("dec.l1.w".into(), 2 * d, cfg.decoder_hidden);
    w("dec.l2.w".into(), cfg.decoder_hidden, cfg.decoder_hidden);
    w("dec.l3.w".into(), cfg.decoder_hidden, 2 * cfg.t_pred);
    if cfg.refine {
        let e = cfg.refine_width();
        for m in ["q", "k", "v"] {
            w(format!("refine.{m}"), d, e);
        }
        w("refine.o".into(), e, d);
    }

    let mut bias = |name: String, cols: usize| {
        specs.push(Spec {
            name,
            rows: 1,
            cols,
            init: Init::Zeros,
            decay: false,
        });
    };
    for enc in ["past", "full"] {
        bias(format!("{enc}.conv.b"), d);
        bias(format!("{enc}.gru.b"), 3 * d);
    }
    for head in ["sim", "rep"] {
        bias(format!("{head}.l1.b"), cfg.head_hidden);
        bias(format!("{head}.l2.b"), d);
    }
    bias("dec.l1.b".into(), cfg.decoder_hidden);
    bias("dec.l2.b".into(), cfg.decoder_hidden);
    bias("dec.l3.b".into(), 2 * cfg.t_pred);

    let mut fixed = |name: &str, rows: usize, cols: usize, init: Init| {
        specs.push(Spec {
            name: name.into(),
            rows,
            cols,
            init,
            decay: false,
        });
    };
    fixed("thresh.sim", 1, 1, Init::Const(cfg.theta_sim));
    fixed("thresh.rep", 1, 1, Init::Const(cfg.theta_rep));
    fixed("gmm.mu", cfg.k_global, d, Init::StdNormal);
    fixed("gmm.rho", cfg.k_global, d, Init::Const(softplus_inv(1.0 - cfg.var_floor)));
    fixed("gmm.logit", 1, cfg.k_global, Init::Zeros);
    specs
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub gru_wx: ParamId,
    pub gru_wh: ParamId,
    pub gru_b: ParamId,
    pub att_q: ParamId,
    pub att_k: ParamId,
    pub att_v: ParamId,
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    pub layers: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Copy, Debug)]
pub struct RefineParams {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

/// Parameter handles of the full forecaster, bound to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub past: EncoderParams,
    pub full: EncoderParams,
    pub sim_head: MlpParams,
    pub rep_head: MlpParams,
    pub xattn_q: ParamId,
    pub xattn_k: ParamId,
    pub decoder: MlpParams,
    pub refine: Option<RefineParams>,
    pub theta_sim: ParamId,
    pub theta_rep: ParamId,
    pub gmm_mu: ParamId,
    pub gmm_rho: ParamId,
    pub gmm_logit: ParamId,
}

impl Model {
    /// Creates freshly initialised parameters for `cfg`.
    pub fn init(cfg: ModelConfig) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        for s in layout(&cfg) {
            let n = s.rows * s.cols;
            let data: Vec<f64> = match s.init {
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Const(v) => vec![v; n],
                Init::StdNormal => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            };
            store.add(&s.name, Tensor::from_vec(s.rows, s.cols, data)?, s.decay);
        }
        let model = Model::bind(cfg, &store)?;
        Ok((model, store))
    }

    /// Looks up every parameter `cfg` requires in `store`, checking shapes.
    pub fn bind(cfg: ModelConfig, store: &ParamStore) -> Result<Model> {
        cfg.validate()?;
        let specs = layout(&cfg);
        for s in &specs {
            let id = store
                .id(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", s.name)))?;
            if store.value(id).shape() != (s.rows, s.cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, config expects {:?}",
                    s.name,
                    store.value(id).shape(),
                    (s.rows, s.cols)
                )));
            }
        }
        if store.len() != specs.len() {
            return Err(Error::Checkpoint(format!(
                "store holds {} parameters, config expects {}",
                store.len(),
                specs.len()
            )));
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let enc = |p: &str| EncoderParams {
            conv_w: id(&format!("{p}.conv.w")),
            conv_b: id(&format!("{p}.conv.b")),
            gru_wx: id(&format!("{p}.gru.wx")),
            gru_wh: id(&format!("{p}.gru.wh")),
            gru_b: id(&format!("{p}.gru.b")),
            att_q: id(&format!("{p}.att.q")),
            att_k: id(&format!("{p}.att.k")),
            att_v: id(&format!("{p}.att.v")),
        };
        let mlp = |p: &str, n: usize| MlpParams {
            layers: (1..=n)
                .map(|l| (id(&format!("{p}.l{l}.w")), id(&format!("{p}.l{l}.b"))))
                .collect(),
        };
        let refine = cfg.refine.then(|| RefineParams {
            q: id("refine.q"),
            k: id("refine.k"),
            v: id("refine.v"),
            o: id("refine.o"),
        });
        Ok(Model {
            past: enc("past"),
            full: enc("full"),
            sim_head: mlp("sim", 2),
            rep_head: mlp("rep", 2),
            xattn_q: id("xattn.q"),
            xattn_k: id("xattn.k"),
            decoder: mlp("dec", 3),
            refine,
            theta_sim: id("thresh.sim"),
            theta_rep: id("thresh.rep"),
            gmm_mu: id("gmm.mu"),
            gmm_rho: id("gmm.rho"),
            gmm_logit: id("gmm.logit"),
            cfg,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    /// Parameter groups used by the gradient-flow audit.
    pub fn groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let enc = |e: &EncoderParams| {
            vec![e.conv_w, e.conv_b, e.gru_wx, e.gru_wh, e.gru_b, e.att_q, e.att_k, e.att_v]
        };
        let mlp = |m: &MlpParams| m.layers.iter().flat_map(|&(w, b)| [w, b]).collect::<Vec<_>>();
        let mut heads = mlp(&self.sim_head);
        heads.extend(mlp(&self.rep_head));
        let mut groups = vec![
            ("past_encoder", enc(&self.past)),
            ("full_encoder", enc(&self.full)),
            ("heads", heads),
            ("decoder", mlp(&self.decoder)),
            ("thresholds", vec![self.theta_sim, self.theta_rep]),
            ("global_gmm", vec![self.gmm_mu, self.gmm_rho, self.gmm_logit]),
            ("attention", vec![self.xattn_q, self.xattn_k]),
        ];
        if let Some(r) = self.refine {
            groups.push(("refine", vec![r.q, r.k, r.v, r.o]));
        }
        groups
    }

    /// Embeds observed tracks. `groups[i]` is the scene of agent `i`; the
    /// social attention stage only mixes agents of the same scene.
    pub fn encode_past(&self, g: &Graph, observed: &[&[Point]], groups: &[usize]) -> Result<Var> {
        for o in observed {
            if o.len() != self.cfg.t_obs {
                return Err(shape(format!("observed track has {} steps, expected {}", o.len(), self.cfg.t_obs)));
            }
        }
        let seqs: Vec<Vec<Point>> = observed.iter().map(|o| o.to_vec()).collect();
        let origins: Vec<Point> = observed.iter().map(|o| o[o.len() - 1]).collect();
        self.encode(g, &self.past, &seqs, &origins, groups)
    }

    /// Embeds complete (observed followed by future) tracks.
    pub fn encode_full(&self, g: &Graph, observed: &[&[Point]], future: &[&[Point]], groups: &[usize]) -> Result<Var> {
        if observed.len() != future.len() {
            return Err(shape("observed and future agent counts differ"));
        }
        let mut seqs = Vec::with_capacity(observed.len());
        for (o, f) in observed.iter().zip(future) {
            if o.len() != self.cfg.t_obs || f.len() != self.cfg.t_pred {
                return Err(shape(format!(
                    "track lengths {}+{} do not match {}+{}",
                    o.len(),
                    f.len(),
                    self.cfg.t_obs,
                    self.cfg.t_pred
                )));
            }
            seqs.push(o.iter().chain(f.iter()).copied().collect::<Vec<_>>());
        }
        let origins: Vec<Point> = observed.iter().map(|o| o[o.len() - 1]).collect();
        self.encode(g, &self.full, &seqs, &origins, groups)
    }

    /// Temporal convolution (kernel 3) -> GRU -> scene-masked self-attention.
    fn encode(&self, g: &Graph, e: &EncoderParams, seqs: &[Vec<Point>], origins: &[Point], groups: &[usize]) -> Result<Var> {
        let n = seqs.len();
        if n == 0 || groups.len() != n {
            return Err(shape("encoder needs one group label per agent"));
        }
        let d = self.cfg.latent_dim;
        let t_len = seqs[0].len();
        let t = &g.tape;

        let mut conv_in = Tensor::zeros(t_len * n, 6);
        for (i, (s, o)) in seqs.iter().zip(origins).enumerate() {
            for step in 0..t_len {
                let row = conv_in.row_slice_mut(step * n + i);
                for (k, off) in [-1i64, 0, 1].into_iter().enumerate() {
                    let src = step as i64 + off;
                    if (0..t_len as i64).contains(&src) {
                        let p = s[src as usize];
                        row[2 * k] = p[0] - o[0];
                        row[2 * k + 1] = p[1] - o[1];
                    }
                }
            }
        }
        let x = t.constant(conv_in);
        let conv = t.relu(t.add_row(t.matmul(x, g.p(e.conv_w)), g.p(e.conv_b)));
        let xg = t.add_row(t.matmul(conv, g.p(e.gru_wx)), g.p(e.gru_b));

        let wh = g.p(e.gru_wh);
        let mut h = t.constant(Tensor::zeros(n, d));
        for step in 0..t_len {
            let xt = t.slice_rows(xg, step * n, n);
            let hh = t.matmul(h, wh);
            let u = t.sigmoid(t.add(t.slice_cols(xt, 0, d), t.slice_cols(hh, 0, d)));
            let r = t.sigmoid(t.add(t.slice_cols(xt, d, d), t.slice_cols(hh, d, d)));
            let cand = t.tanh(t.add(t.slice_cols(xt, 2 * d, d), t.mul(r, t.slice_cols(hh, 2 * d, d))));
            h = t.add(cand, t.mul(u, t.sub(h, cand)));
        }

        let mut mask = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if groups[i] != groups[j] {
                    mask.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
        let q = t.matmul(h, g.p(e.att_q));
        let k = t.matmul(h, g.p(e.att_k));
        let v = t.matmul(h, g.p(e.att_v));
        let scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / (d as f64).sqrt());
        let attn = t.softmax_rows(t.add(scores, t.constant(mask)));
        Ok(t.add(h, t.matmul(attn, v)))
    }

    fn mlp(&self, g: &Graph, m: &MlpParams, mut x: Var) -> Var {
        let t = &g.tape;
        let last = m.layers.len() - 1;
        for (l, &(w, b)) in m.layers.iter().enumerate() {
            x = t.add_row(t.matmul(x, g.p(w)), g.p(b));
            if l < last {
                x = t.relu(x);
            }
        }
        x
    }

    /// Similarity and repulsion projections, each coordinate in (0, 1).
    pub fn project_heads(&self, g: &Graph, f_full: Var) -> (Var, Var) {
        let s = self.mlp(g, &self.sim_head, f_full);
        let r = self.mlp(g, &self.rep_head, f_full);
        (g.tape.sigmoid(s), g.tape.sigmoid(r))
    }

    /// Learnable clustering thresholds `(theta_sim, theta_rep)` as 1x1 nodes.
    pub fn thresholds(&self, g: &Graph) -> (Var, Var) {
        (g.p(self.theta_sim), g.p(self.theta_rep))
    }

    /// Attention of each query row over mixture components.
    ///
    /// Keys are a learned linear map of `[mean, variance, weight]` per component;
    /// scores are normalised row-wise by entmax-1.5 or softmax.
    pub fn cross_attention(&self, g: &Graph, f_past: Var, means: Var, vars: Var, weights: Var) -> Result<Var> {
        let t = &g.tape;
        let (k, d) = t.shape(means);
        if k == 0 {
            return Err(Error::Domain("cross-attention over an empty mixture".into()));
        }
        if d != self.cfg.latent_dim || t.shape(vars) != (k, d) || t.shape(weights) != (k, 1) {
            return Err(shape("mixture components do not match the latent dimension"));
        }
        let keys_in = t.concat_cols(&[means, vars, weights]);
        let keys = t.matmul(keys_in, g.p(self.xattn_k));
        let q = t.matmul(f_past, g.p(self.xattn_q));
        let scores = t.scale(t.matmul(q, t.transpose(keys)), 1.0 / (d as f64).sqrt());
        Ok(match self.cfg.attention {
            AttentionNorm::Entmax15 => t.entmax15_rows(scores),
            AttentionNorm::Softmax => t.softmax_rows(scores),
        })
    }

    /// Decodes `(f_past, z)` row pairs into `T_pred x 2` displacements from the
    /// last observed position, flattened row-wise as `[x0, y0, x1, y1, ...]`.
    pub fn decode(&self, g: &Graph, f_past: Var, z: Var) -> Result<Var> {
        let t = &g.tape;
        let (m, d) = t.shape(f_past);
        if t.shape(z) != (m, d) || d != self.cfg.latent_dim {
            return Err(shape(format!("decoder inputs {:?} and {:?}", t.shape(f_past), t.shape(z))));
        }
        let x = t.concat_cols(&[f_past, z]);
        Ok(self.mlp(g, &self.decoder, x))
    }

    /// Multi-head self-attention across sampled codes with a residual
    /// connection. Identity when refinement is disabled.
    pub fn refine_samples(&self, g: &Graph, codes: Var) -> Var {
        let Some(r) = self.refine else { return codes };
        let t = &g.tape;
        let e = self.cfg.refine_width();
        let heads = self.cfg.refine_heads;
        let hd = e / heads;
        let q = t.matmul(codes, g.p(r.q));
        let k = t.matmul(codes, g.p(r.k));
        let v = t.matmul(codes, g.p(r.v));
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = t.slice_cols(q, h * hd, hd);
                let kh = t.slice_cols(k, h * hd, hd);
                let vh = t.slice_cols(v, h * hd, hd);
                let s = t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / (hd as f64).sqrt());
                t.matmul(t.softmax_rows(s), vh)
            })
            .collect();
        let cat = t.concat_cols(&outs);
        t.add(codes, t.matmul(cat, g.p(r.o)))
    }

    /// Means, variances (`floor + softplus(rho)`) and base weights (softmax of
    /// logits, as a `K x 1` column) of the global mixture.
    pub fn global_gmm(&self, g: &Graph) -> (Var, Var, Var) {
        let t = &g.tape;
        let mu = g.p(self.gmm_mu);
        let var = t.shift(t.softplus(g.p(self.gmm_rho)), self.cfg.var_floor);
        let pi = t.transpose(t.softmax_rows(g.p(self.gmm_logit)));
        (mu, var, pi)
    }
}

/// Converts one decoded row of displacements into absolute positions.
pub fn to_absolute(row: &[f64], origin: Point) -> Vec<Point> {
    row.chunks_exact(2).map(|c| [origin[0] + c[0], origin[1] + c[1]]).collect()
}
