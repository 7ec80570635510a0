//! Brownian increments, Euler–Maruyama rollouts of the two latent SDEs, and the
//! drift-gap KL between them.
//!
//! Both rollouts are batched: every state is a `[batch, 4]` matrix on the graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kinematics::{bicycle_drift_graph, BicycleParams, LatentState};
use crate::tensor::Tensor;

/// Per-step Gaussian increments of a 4-D Wiener process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrownianPath {
    pub increments: Vec<[f64; 4]>,
    pub seed: u64,
}

impl BrownianPath {
    pub fn zeros(steps: usize) -> Self {
        Self {
            increments: vec![[0.0; 4]; steps],
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            increments: self
                .increments
                .iter()
                .map(|w| w.map(|v| v * factor))
                .collect(),
            seed: self.seed,
        }
    }
}

/// `steps` i.i.d. increments with each component ~ N(0, step_var).
pub fn sample_brownian(steps: usize, step_var: f64, seed: u64) -> BrownianPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = step_var.sqrt();
    let increments = (0..steps)
        .map(|_| {
            let mut w = [0.0; 4];
            for c in &mut w {
                let n: f64 = StandardNormal.sample(&mut rng);
                *c = sd * n;
            }
            w
        })
        .collect();
    BrownianPath { increments, seed }
}

/// Gathers step `t` of every path into a `[paths.len(), 4]` matrix.
pub fn stack_step(paths: &[BrownianPath], t: usize) -> Result<Tensor> {
    let rows: Vec<[f64; 4]> = paths.iter().map(|p| p.increments[t]).collect();
    Tensor::from_rows(&rows)
}

/// Diagonal of the shared diffusion matrix at one state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionOutput {
    pub diag: [f64; 4],
}

/// States, drift evaluations, diffusion evaluations and (bicycle only) controls of one rollout.
#[derive(Clone, Debug, Default)]
pub struct LatentRollout {
    /// `T + 1` states, starting with the initial state.
    pub states: Vec<Var>,
    pub drifts: Vec<Var>,
    pub diffusions: Vec<Var>,
    pub controls: Vec<Var>,
}

impl LatentRollout {
    pub fn steps(&self) -> usize {
        self.drifts.len()
    }

    /// Rows of every state for batch element `row`.
    pub fn trace(&self, g: &Graph, row: usize) -> Vec<LatentState> {
        self.states
            .iter()
            .map(|&s| LatentState::from_slice(g.value(s).row(row)))
            .collect()
    }
}

/// `drift(z_t, sem, ctx_t)` for the neural SDE.
pub type DriftFn<'a> = dyn FnMut(&mut Graph, Var, Var, Var) -> Result<Var> + 'a;
/// Diagonal diffusion `g(state)`, returning a matrix shaped like the state.
pub type DiffusionFn<'a> = dyn FnMut(&mut Graph, Var) -> Result<Var> + 'a;
/// Controller `pi(state)` returning `[batch, 2]` controls.
pub type ControlFn<'a> = dyn FnMut(&mut Graph, Var) -> Result<Var> + 'a;

fn euler_step(g: &mut Graph, drift: Var, diffusion: Var, noise: Var) -> Result<Var> {
    let shock = g.mul(diffusion, noise)?;
    g.add(drift, shock)
}

/// `z_{t+1} = drift(z_t, sem, ctx_t) + diag(diffusion(z_t)) * dW_t`.
pub fn rollout_lksde(
    g: &mut Graph,
    z0: Var,
    sem: Var,
    ctx: &[Var],
    noise: &[Var],
    drift: &mut DriftFn<'_>,
    diffusion: &mut DiffusionFn<'_>,
) -> Result<LatentRollout> {
    if ctx.len() != noise.len() {
        return Err(Error::LengthMismatch {
            what: "context steps vs Brownian steps",
            expected: noise.len(),
            actual: ctx.len(),
        });
    }
    let mut out = LatentRollout {
        states: vec![z0],
        ..Default::default()
    };
    let mut z = z0;
    for (&c, &dw) in ctx.iter().zip(noise) {
        let f = drift(g, z, sem, c)?;
        let d = diffusion(g, z)?;
        z = euler_step(g, f, d, dw)?;
        out.drifts.push(f);
        out.diffusions.push(d);
        out.states.push(z);
    }
    Ok(out)
}

/// `s_{t+1} = h(s_t, pi(s_t)) + diag(diffusion(s_t)) * dW_t` with the bicycle drift `h`.
pub fn rollout_bicycle(
    g: &mut Graph,
    s0: Var,
    noise: &[Var],
    controller: &mut ControlFn<'_>,
    params: &BicycleParams,
    diffusion: &mut DiffusionFn<'_>,
) -> Result<LatentRollout> {
    let mut out = LatentRollout {
        states: vec![s0],
        ..Default::default()
    };
    let mut s = s0;
    for &dw in noise {
        let u = controller(g, s)?;
        let h = bicycle_drift_graph(g, s, u, params)?;
        let d = diffusion(g, s)?;
        s = euler_step(g, h, d, dw)?;
        out.controls.push(u);
        out.drifts.push(h);
        out.diffusions.push(d);
        out.states.push(s);
    }
    Ok(out)
}

/// `sum_t sum_rows 1/2 || (drift_lk[t] - drift_bike[t]) / diffusion[t] ||^2 / batch`.
///
/// Gradient routing is the caller's business: pass detached bicycle drifts to keep
/// the controller out of this loss.
pub fn kinematic_kl_loss(
    g: &mut Graph,
    drift_lk: &[Var],
    drift_bike: &[Var],
    diffusion: &[Var],
    batch: usize,
) -> Result<Var> {
    if drift_lk.len() != drift_bike.len() || drift_lk.len() != diffusion.len() {
        return Err(Error::LengthMismatch {
            what: "kinematic loss steps",
            expected: drift_lk.len(),
            actual: drift_bike.len().min(diffusion.len()),
        });
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = g.scalar(0.0);
    for ((&a, &b), &d) in drift_lk.iter().zip(drift_bike).zip(diffusion) {
        let gap = g.sub(a, b)?;
        let inv = g.reciprocal(d);
        let scaled = g.mul(gap, inv)?;
        let sq = g.square(scaled);
        let s = g.sum(sq);
        total = g.add(total, s)?;
    }
    Ok(g.scale(total, 0.5 / batch as f64))
}
