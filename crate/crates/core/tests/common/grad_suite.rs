//! Finite-difference checks of every differentiable stage, shared by the
//! gradient tests and the acceptance suite.

use super::{fd_check, FdReport};
use agma::batch_prior::{pair_scores_var, soft_adjacency_var};
use agma::global_prior::{gumbel_tensor, normal_tensor, sample_global_var};
use agma::nets::{Graph, Model, ModelConfig, ParamId, ParamStore};
use agma::ot::{distill_loss_var, w2_cost_var};
use agma::tape::{Tape, Var};
use agma::tensor::Tensor;
use agma::traj::Point;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const COORDS: usize = 6;
pub const TOL: f64 = 1e-3;

fn cfg(seed: u64) -> ModelConfig {
    ModelConfig {
        latent_dim: 8,
        decoder_hidden: 16,
        head_hidden: 8,
        k_global: 6,
        seed,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::from_vec(
        r,
        c,
        (0..r * c)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

fn tracks(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<Point>> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let (vx, vy) = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
            (0..len)
                .map(|t| {
                    [
                        x + vx * t as f64 + rng.random_range(-0.1..0.1),
                        y + vy * t as f64,
                    ]
                })
                .collect()
        })
        .collect()
}

/// Checks the gradient of `loss` w.r.t. each named parameter on random coordinates.
fn check_params(
    store: &ParamStore,
    names: &[&str],
    loss: &dyn Fn(&Graph) -> Var,
    rng: &mut ChaCha8Rng,
) -> FdReport {
    let g = Graph::new(store);
    let l = loss(&g);
    let grads = g.backward(l);
    let mut rep = FdReport::default();
    for name in names {
        let id: ParamId = store
            .id(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        let x = store.value(id).data().to_vec();
        let analytic = grads
            .get(id)
            .map_or(vec![0.0; x.len()], |t| t.data().to_vec());
        let coords: Vec<usize> = (0..COORDS).map(|_| rng.random_range(0..x.len())).collect();
        let mut probe = store.clone();
        let mut f = |v: &[f64]| {
            probe.value_mut(id).data_mut().copy_from_slice(v);
            let g = Graph::frozen(&probe);
            let out = loss(&g);
            g.tape.item(out)
        };
        rep.merge(fd_check(&mut f, &x, &analytic, &coords));
    }
    rep
}

/// Relative error within tolerance, at most one coordinate in twenty skipped as a kink.
pub fn passes(rep: &FdReport) -> bool {
    rep.checked > 0 && rep.max_rel <= TOL && rep.nonsmooth * 20 <= rep.checked
}

fn projected(t: &Tape, x: Var, r: &Tensor) -> Var {
    t.sum(t.mul(x, t.constant(r.clone())))
}

fn run(
    names: &[&str],
    build: impl Fn(&Model, &mut ChaCha8Rng) -> Box<dyn Fn(&Graph) -> Var>,
) -> FdReport {
    let mut total = FdReport::default();
    for inst in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let (model, store) = Model::init(cfg(inst)).unwrap();
        let loss = build(&model, &mut rng);
        total.merge(check_params(&store, names, loss.as_ref(), &mut rng));
    }
    total
}

const PAST: [&str; 8] = [
    "past.conv.w",
    "past.conv.b",
    "past.gru.wx",
    "past.gru.wh",
    "past.gru.b",
    "past.att.q",
    "past.att.k",
    "past.att.v",
];

pub fn past_encoder_gradients() -> FdReport {
    run(&PAST, |model, rng| {
        let obs = tracks(rng, 3, 8);
        let r = random(rng, 3, 8, 1.0);
        let model = model.clone();
        Box::new(move |g: &Graph| {
            let o: Vec<&[Point]> = obs.iter().map(|t| t.as_slice()).collect();
            let f = model.encode_past(g, &o, &[0, 0, 1]).unwrap();
            projected(&g.tape, f, &r)
        })
    })
}

pub fn full_encoder_gradients() -> FdReport {
    let names: Vec<String> = PAST.iter().map(|n| n.replace("past", "full")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    run(&names, |model, rng| {
        let obs = tracks(rng, 3, 20);
        let r = random(rng, 3, 8, 1.0);
        let model = model.clone();
        Box::new(move |g: &Graph| {
            let o: Vec<&[Point]> = obs.iter().map(|t| &t[..8]).collect();
            let fu: Vec<&[Point]> = obs.iter().map(|t| &t[8..]).collect();
            let f = model.encode_full(g, &o, &fu, &[0, 1, 1]).unwrap();
            projected(&g.tape, f, &r)
        })
    })
}

pub fn head_gradients() -> FdReport {
    run(
        &[
            "sim.l1.w", "sim.l1.b", "sim.l2.w", "sim.l2.b", "rep.l1.w", "rep.l2.w", "rep.l2.b",
        ],
        |model, rng| {
            let f = random(rng, 4, 8, 1.5);
            let (r1, r2) = (random(rng, 4, 8, 1.0), random(rng, 4, 8, 1.0));
            let model = model.clone();
            Box::new(move |g: &Graph| {
                let t = &g.tape;
                let (s, r) = model.project_heads(g, t.constant(f.clone()));
                t.add(projected(t, s, &r1), projected(t, r, &r2))
            })
        },
    )
}

pub fn cross_attention_gradients() -> FdReport {
    run(
        &["xattn.q", "xattn.k", "gmm.mu", "gmm.rho", "gmm.logit"],
        |model, rng| {
            let f = random(rng, 3, 8, 2.0);
            let r = random(rng, 3, 6, 1.0);
            let model = model.clone();
            Box::new(move |g: &Graph| {
                let t = &g.tape;
                let (mu, var, pi) = model.global_gmm(g);
                let a = model
                    .cross_attention(g, t.constant(f.clone()), mu, var, pi)
                    .unwrap();
                projected(t, a, &r)
            })
        },
    )
}

pub fn decoder_gradients() -> FdReport {
    run(
        &[
            "dec.l1.w", "dec.l1.b", "dec.l2.w", "dec.l2.b", "dec.l3.w", "dec.l3.b",
        ],
        |model, rng| {
            let (f, z) = (random(rng, 5, 8, 1.0), random(rng, 5, 8, 1.0));
            let r = random(rng, 5, 24, 1.0);
            let model = model.clone();
            Box::new(move |g: &Graph| {
                let t = &g.tape;
                let y = model
                    .decode(g, t.constant(f.clone()), t.constant(z.clone()))
                    .unwrap();
                projected(t, y, &r)
            })
        },
    )
}

pub fn gumbel_path_gradients() -> FdReport {
    run(
        &["gmm.mu", "gmm.rho", "gmm.logit", "xattn.q", "xattn.k"],
        |model, rng| {
            let f = random(rng, 2, 8, 2.0);
            let n = 3;
            let gum = gumbel_tensor(rng, 2 * n, 6);
            let eps = normal_tensor(rng, 2 * n, 8);
            let r = random(rng, 2 * n, 8, 1.0);
            let model = model.clone();
            Box::new(move |g: &Graph| {
                let t = &g.tape;
                let (mu, var, pi) = model.global_gmm(g);
                let a = model
                    .cross_attention(g, t.constant(f.clone()), mu, var, pi)
                    .unwrap();
                let z = sample_global_var(t, a, mu, var, &gum, &eps, n, 1.0);
                projected(t, z, &r)
            })
        },
    )
}

pub fn sinkhorn_gradients_through_global_side() -> FdReport {
    run(
        &["gmm.mu", "gmm.rho", "xattn.q", "xattn.k"],
        |model, rng| {
            let f = random(rng, 4, 8, 2.0);
            let bmu = random(rng, 3, 8, 1.5);
            let bvar = random(rng, 3, 8, 1.0).map(|v| v.abs() + 0.1);
            let beta = vec![0.5, 0.25, 0.25];
            let model = model.clone();
            Box::new(move |g: &Graph| {
                let t = &g.tape;
                let (mu, var, pi) = model.global_gmm(g);
                let a = model
                    .cross_attention(g, t.constant(f.clone()), mu, var, pi)
                    .unwrap();
                let a_bar = t.transpose(t.scale(t.sum_cols(a), 0.25));
                let cost = w2_cost_var(
                    t,
                    mu,
                    var,
                    t.constant(bmu.clone()),
                    t.constant(bvar.clone()),
                );
                distill_loss_var(t, cost, a_bar, &beta, 0.1, 20)
            })
        },
    )
}

pub fn sinkhorn_gradients_through_batch_side() -> FdReport {
    let mut total = FdReport::default();
    for inst in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + inst);
        let gmu = random(&mut rng, 5, 3, 1.5);
        let gvar = random(&mut rng, 5, 3, 1.0).map(|v| v.abs() + 0.2);
        let a: Vec<f64> = {
            let w: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        };
        let bmu = random(&mut rng, 2, 3, 1.5);
        let bvar = random(&mut rng, 2, 3, 1.0).map(|v| v.abs() + 0.2);
        let beta = [0.4, 0.6];
        let loss = |x: &[f64], grad: bool| {
            let t = Tape::new();
            let bm = t.leaf(Tensor::from_vec(2, 3, x[..6].to_vec()).unwrap());
            let bv = t.leaf(Tensor::from_vec(2, 3, x[6..].to_vec()).unwrap());
            let cost = w2_cost_var(
                &t,
                t.constant(gmu.clone()),
                t.constant(gvar.clone()),
                bm,
                bv,
            );
            let l = distill_loss_var(&t, cost, t.constant(Tensor::column(&a)), &beta, 0.1, 20);
            let g = if grad {
                let gr = t.backward(l);
                let mut v = gr.wrt(bm, (2, 3)).into_vec();
                v.extend(gr.wrt(bv, (2, 3)).into_vec());
                v
            } else {
                Vec::new()
            };
            (t.item(l), g)
        };
        let x: Vec<f64> = bmu.data().iter().chain(bvar.data()).copied().collect();
        let (_, grad) = loss(&x, true);
        let coords: Vec<usize> = (0..12).collect();
        total.merge(fd_check(
            &mut |v: &[f64]| loss(v, false).0,
            &x,
            &grad,
            &coords,
        ));
    }
    total
}

pub fn soft_adjacency_gradients() -> FdReport {
    run(
        &["thresh.sim", "thresh.rep", "sim.l2.w", "rep.l2.w"],
        |model, rng| {
            let f = random(rng, 4, 8, 3.0);
            let r = random(rng, 4, 4, 1.0);
            let model = model.clone();
            Box::new(move |g: &Graph| {
                let t = &g.tape;
                let (s, rr) = model.project_heads(g, t.constant(f.clone()));
                let (sim, rep) = pair_scores_var(t, s, rr);
                let (ts, tr) = model.thresholds(g);
                let a = soft_adjacency_var(t, sim, rep, ts, tr, 0.1);
                projected(t, a, &r)
            })
        },
    )
}

pub fn refinement_gradients() -> FdReport {
    let mut total = FdReport::default();
    for inst in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + inst);
        let cfg = ModelConfig {
            refine: true,
            refine_dim: 16,
            ..cfg(inst)
        };
        let (model, store) = Model::init(cfg).unwrap();
        let codes = random(&mut rng, 5, 8, 1.5);
        let r = random(&mut rng, 5, 8, 1.0);
        let loss = move |g: &Graph| {
            let z = model.refine_samples(g, g.tape.constant(codes.clone()));
            projected(&g.tape, z, &r)
        };
        total.merge(check_params(
            &store,
            &["refine.q", "refine.k", "refine.v", "refine.o"],
            &loss,
            &mut rng,
        ));
    }
    total
}

/// Every check, by stage name.
pub const ALL: [(&str, fn() -> FdReport); 10] = [
    ("past encoder", past_encoder_gradients),
    ("full encoder", full_encoder_gradients),
    ("heads", head_gradients),
    ("cross attention", cross_attention_gradients),
    ("decoder", decoder_gradients),
    ("gumbel sampling", gumbel_path_gradients),
    (
        "unrolled sinkhorn, global side",
        sinkhorn_gradients_through_global_side,
    ),
    (
        "unrolled sinkhorn, batch side",
        sinkhorn_gradients_through_batch_side,
    ),
    ("soft adjacency", soft_adjacency_gradients),
    ("refinement", refinement_gradients),
];
