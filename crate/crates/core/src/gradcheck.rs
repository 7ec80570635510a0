//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Unary, Var};
use crate::networks::{LkSdeModel, ModelConfig, SceneBatch, CTX_DIM, SEM_DIM};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scenario::{generate_benchmark, GenerationSpec};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
/// turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose analytic gradient is not exactly zero.
    pub nonzero: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_error = self.max_rel_error.max(relative_error(analytic, numeric));
        self.checked += 1;
        if analytic != 0.0 {
            self.nonzero += 1;
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            nonzero: self.nonzero + other.nonzero,
        }
    }
}

type InputFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;
type ParamFn<'a> = dyn Fn(&mut Graph, &Bound) -> Result<Var> + 'a;

/// Compares the gradient of a scalar builder with respect to each input tensor.
pub fn check_inputs(inputs: &[Tensor], build: &InputFn<'_>) -> Result<GradCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;
    let mut out = GradCheck::default();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v);
        for j in 0..inputs[i].numel() {
            let eval = |d: f64| -> Result<f64> {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += d;
                        }
                        g.param(t)
                    })
                    .collect();
                let r = build(&mut g, &vars)?;
                Ok(g.value(r).item())
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            out.record(analytic.data()[j], numeric);
        }
    }
    Ok(out)
}

/// Compares the gradient of a scalar loss with respect to the parameters `ids`.
pub fn check_params(store: &ParamStore, ids: &[ParamId], loss: &ParamFn<'_>) -> Result<GradCheck> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let root = loss(&mut g, &p)?;
    g.backward(root)?;
    let grads = p.grads(&g);
    let mut work = store.clone();
    let mut out = GradCheck::default();
    for &id in ids {
        for j in 0..store.get(id).numel() {
            let base = store.get(id).data()[j];
            let mut eval = |v: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[j] = v;
                let mut g = Graph::new();
                let p = work.bind_frozen(&mut g);
                let r = loss(&mut g, &p)?;
                Ok(g.value(r).item())
            };
            let numeric = (eval(base + FD_STEP)? - eval(base - FD_STEP)?) / (2.0 * FD_STEP);
            work.get_mut(id).data_mut()[j] = base;
            out.record(grads[id.0].data()[j], numeric);
        }
    }
    Ok(out)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape matches data")
}

/// Weighted sum `sum(w * x)` with fixed random weights, a generic scalar probe.
fn probe(g: &mut Graph, x: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = random(&mut rng, g.shape(x), -1.0, 1.0);
    let w = g.constant(w);
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

/// One check per differentiable graph op, on inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Result<Vec<(String, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(&mut rng, &[3, 4], -1.2, 1.2);
    let b = random(&mut rng, &[4, 2], -1.2, 1.2);
    let c = random(&mut rng, &[3, 4], -1.2, 1.2);
    let bias = random(&mut rng, &[1, 4], -1.0, 1.0);
    let s = random(&mut rng, &[1], 0.5, 1.5);
    let pos = random(&mut rng, &[3, 4], 0.3, 2.0);
    // Keep inputs away from the kinks of relu, clamp and smooth-l1.
    let off = random(&mut rng, &[3, 4], 0.1, 0.9).map(|v| if v < 0.5 { v - 1.3 } else { v });
    let ps = seed.wrapping_add(1000);

    let mut out = Vec::new();
    out.push((
        "matmul".to_string(),
        check_inputs(&[a.clone(), b], &|g, v| {
            let m = g.matmul(v[0], v[1])?;
            probe(g, m, ps)
        })?,
    ));
    type Bin = fn(&mut Graph, Var, Var) -> Result<Var>;
    let bins: [(&str, Bin); 3] = [
        ("add", Graph::add),
        ("sub", Graph::sub),
        ("mul", Graph::mul),
    ];
    for (name, op) in bins {
        let mut r = check_inputs(&[a.clone(), c.clone()], &|g, v| {
            let m = op(g, v[0], v[1])?;
            let sq = g.square(m);
            Ok(g.mean(sq))
        })?;
        r = r.merge(check_inputs(&[a.clone(), s.clone()], &|g, v| {
            let m = op(g, v[0], v[1])?;
            probe(g, m, ps)
        })?);
        r = r.merge(check_inputs(&[s.clone(), a.clone()], &|g, v| {
            let m = op(g, v[0], v[1])?;
            let sq = g.square(m);
            Ok(g.sum(sq))
        })?);
        out.push((name.to_string(), r));
    }
    out.push((
        "add_bias".to_string(),
        check_inputs(&[a.clone(), bias], &|g, v| {
            let m = g.add_bias(v[0], v[1])?;
            probe(g, m, ps)
        })?,
    ));
    for kind in Unary::ALL {
        let input = match kind {
            Unary::Log | Unary::Reciprocal => pos.clone(),
            Unary::Relu | Unary::SmoothL1 => off.clone(),
            _ => a.clone(),
        };
        out.push((
            format!("{kind:?}").to_lowercase(),
            check_inputs(&[input], &|g, v| {
                let u = g.unary(kind, v[0]);
                probe(g, u, ps)
            })?,
        ));
    }
    out.push((
        "clamp".to_string(),
        check_inputs(std::slice::from_ref(&off), &|g, v| {
            let u = g.clamp(v[0], -1.0, 0.5);
            probe(g, u, ps)
        })?,
    ));
    out.push((
        "scale_shift".to_string(),
        check_inputs(std::slice::from_ref(&a), &|g, v| {
            let sc = g.scale(v[0], -2.5);
            let sh = g.shift(sc, 0.7);
            let sq = g.square(sh);
            Ok(g.mean(sq))
        })?,
    ));
    out.push((
        "sum_mean".to_string(),
        check_inputs(std::slice::from_ref(&a), &|g, v| {
            let t = g.tanh(v[0]);
            let m = g.mean(t);
            let s = g.sum(v[0]);
            let p = g.mul(m, s)?;
            Ok(g.sum(p))
        })?,
    ));
    out.push((
        "slice_concat".to_string(),
        check_inputs(&[a, c], &|g, v| {
            let left = g.slice_cols(v[0], 1, 2)?;
            let right = g.slice_cols(v[1], 0, 3)?;
            let joined = g.concat_cols(&[left, right, v[0]])?;
            let stacked = g.concat_rows(&[joined, joined])?;
            let t = g.tanh(stacked);
            probe(g, t, ps)
        })?,
    ));
    Ok(out)
}

/// A deliberately small model so that every parameter can be perturbed.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        history_steps: 6,
        horizon: 4,
        feature_width: 8,
        hidden: 6,
        controller_hidden: 6,
        lane_points: 3,
        ..ModelConfig::default()
    }
}

/// Per-network checks (`extractor`, `e_s`, `e_c`, `f_drift`, `g_diff`,
/// `pi_controller`, `decoder`) over every parameter of a small model built from `seed`.
pub fn network_cases(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let cfg = small_model_config();
    let model = LkSdeModel::new(cfg.clone(), seed)?;
    let spec = GenerationSpec {
        history_steps: cfg.history_steps,
        horizon: cfg.horizon,
        bicycle: cfg.bicycle,
    };
    let scenes = generate_benchmark(&spec, 1, 0.05, seed)?;
    let refs: Vec<_> = scenes.iter().take(3).collect();
    let batch = SceneBatch::new(&refs, &cfg)?;
    let b = refs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = random(&mut rng, &[b, cfg.feature_width], -1.0, 1.0);
    let z = random(&mut rng, &[b, 4], -1.0, 1.0);
    let sem = random(&mut rng, &[b, SEM_DIM], -1.0, 1.0);
    let ctx = random(&mut rng, &[b, CTX_DIM], -1.0, 1.0);
    let ps = seed.wrapping_add(77);
    let store = &model.store;
    let m = &model;

    let mut out = Vec::new();
    out.push((
        "extractor",
        check_params(store, &store.group("extractor"), &|g, p| {
            let f = m.features(g, p, &batch)?;
            probe(g, f, ps)
        })?,
    ));
    out.push((
        "e_s",
        check_params(store, &store.group("e_s"), &|g, p| {
            let x = g.constant(x.clone());
            let (mean, lv) = m.encode_initial(g, p, x)?;
            let both = g.concat_cols(&[mean, lv])?;
            probe(g, both, ps)
        })?,
    ));
    out.push((
        "e_c",
        check_params(store, &store.group("e_c"), &|g, p| {
            let x = g.constant(x.clone());
            let (s, c) = m.encode_context(g, p, x)?;
            let mut parts = vec![s];
            parts.extend(c);
            let all = g.concat_cols(&parts)?;
            probe(g, all, ps)
        })?,
    ));
    out.push((
        "f_drift",
        check_params(store, &store.group("f_drift"), &|g, p| {
            let (z, s, c) = (
                g.constant(z.clone()),
                g.constant(sem.clone()),
                g.constant(ctx.clone()),
            );
            let f = m.drift_net(g, p, z, s, c)?;
            probe(g, f, ps)
        })?,
    ));
    out.push((
        "g_diff",
        check_params(store, &store.group("g_diff"), &|g, p| {
            let z = g.constant(z.clone());
            let d = m.diffusion_net(g, p, z)?;
            let l = g.log(d);
            probe(g, l, ps)
        })?,
    ));
    out.push((
        "pi_controller",
        check_params(store, &store.group("pi_controller"), &|g, p| {
            let z = g.constant(z.clone());
            let u = m.controller.forward(g, p, z)?;
            probe(g, u, ps)
        })?,
    ));
    out.push((
        "decoder",
        check_params(store, &store.group("decoder"), &|g, p| {
            let z = g.constant(z.clone());
            let d = m.decode(g, p, z)?;
            probe(g, d, ps)
        })?,
    ));
    Ok(out)
}
