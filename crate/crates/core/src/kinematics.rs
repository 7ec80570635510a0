//! Kinematic bicycle drift and the learnable feedback controller.
//!
//! One step of the drift moves the vehicle centre by `delta * v` along the
//! heading `psi + beta`, where `beta = atan(tan(u2) * l_r / (l_f + l_r))` is
//! the slip angle induced by the front-wheel steering angle `u2`. Speed
//! integrates the acceleration `u1` and yaw integrates `v / l_r * sin(beta)`.
//!
//! The axis labels follow the state layout `(x, y, v, psi)`; `x` advances with
//! `cos` and `y` with `sin` of the heading.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Mlp};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Four-component latent vehicle state shared by both latent SDEs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    /// Yaw in radians, never wrapped.
    pub psi: f64,
}

impl LatentState {
    pub const DIM: usize = 4;

    pub fn new(x: f64, y: f64, v: f64, psi: f64) -> Self {
        Self { x, y, v, psi }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.v, self.psi]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Stacks states into a `[n, 4]` matrix.
    pub fn stack(states: &[LatentState]) -> Result<Tensor> {
        let rows: Vec<[f64; 4]> = states.iter().map(|s| s.to_array()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn rows(t: &Tensor) -> Vec<LatentState> {
        let (n, _) = t.dims2().expect("state matrix");
        (0..n).map(|r| Self::from_slice(t.row(r))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicycleParams {
    /// Centre to front axle.
    pub l_f: f64,
    /// Centre to rear axle.
    pub l_r: f64,
    /// Sampling period in seconds.
    pub delta: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            l_f: 1.5,
            l_r: 1.5,
            delta: 0.1,
        }
    }
}

impl BicycleParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l_f", self.l_f), ("l_r", self.l_r), ("delta", self.delta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "bicycle parameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// The same vehicle with lengths expressed in units of `unit` meters.
    pub fn in_length_units(&self, unit: f64) -> Self {
        Self {
            l_f: self.l_f / unit,
            l_r: self.l_r / unit,
            delta: self.delta,
        }
    }

    fn rear_ratio(&self) -> f64 {
        self.l_r / (self.l_f + self.l_r)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Acceleration.
    pub u1: f64,
    /// Front-wheel steering angle in radians.
    pub u2: f64,
}

impl ControlInput {
    pub fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }
}

pub fn slip_angle(u2: f64, params: &BicycleParams) -> Result<f64> {
    if !(u2.abs() < FRAC_PI_2) {
        return Err(Error::SteeringOutOfRange(u2));
    }
    Ok((u2.tan() * params.rear_ratio()).atan())
}

/// Deterministic next state under the bicycle model.
pub fn bicycle_drift(
    state: LatentState,
    control: ControlInput,
    params: &BicycleParams,
) -> Result<LatentState> {
    let beta = slip_angle(control.u2, params)?;
    let heading = state.psi + beta;
    Ok(LatentState {
        x: state.x + params.delta * state.v * heading.cos(),
        y: state.y + params.delta * state.v * heading.sin(),
        v: state.v + params.delta * control.u1,
        psi: state.psi + params.delta * state.v / params.l_r * beta.sin(),
    })
}

/// Batched bicycle drift on the graph: `state` is `[n, 4]`, `control` is `[n, 2]`.
///
/// Steering must already be bounded inside `(-pi/2, pi/2)`; the controller guarantees it.
pub fn bicycle_drift_graph(
    g: &mut Graph,
    state: Var,
    control: Var,
    params: &BicycleParams,
) -> Result<Var> {
    let t = g.value(control);
    let Some((n, 2)) = t.dims2() else {
        return Err(Error::ShapeMismatch {
            op: "bicycle_drift",
            lhs: g.shape(state).to_vec(),
            rhs: t.shape().to_vec(),
        });
    };
    if let Some(bad) = (0..n)
        .map(|r| t.get2(r, 1))
        .find(|u2| !(u2.abs() < FRAC_PI_2))
    {
        return Err(Error::SteeringOutOfRange(bad));
    }
    let x = g.slice_cols(state, 0, 1)?;
    let y = g.slice_cols(state, 1, 1)?;
    let v = g.slice_cols(state, 2, 1)?;
    let psi = g.slice_cols(state, 3, 1)?;
    let u1 = g.slice_cols(control, 0, 1)?;
    let u2 = g.slice_cols(control, 1, 1)?;

    let tan_u2 = g.tan(u2);
    let scaled = g.scale(tan_u2, params.rear_ratio());
    let beta = g.atan(scaled);
    let heading = g.add(psi, beta)?;
    let step = g.scale(v, params.delta);

    let cos_h = g.cos(heading);
    let dx = g.mul(step, cos_h)?;
    let x1 = g.add(x, dx)?;

    let sin_h = g.sin(heading);
    let dy = g.mul(step, sin_h)?;
    let y1 = g.add(y, dy)?;

    let dv = g.scale(u1, params.delta);
    let v1 = g.add(v, dv)?;

    let sin_b = g.sin(beta);
    let yaw_rate = g.mul(v, sin_b)?;
    let dpsi = g.scale(yaw_rate, params.delta / params.l_r);
    let psi1 = g.add(psi, dpsi)?;

    g.concat_cols(&[x1, y1, v1, psi1])
}

/// Feedback controller `(u1, u2) = pi(state)`: a tanh MLP whose steering output
/// is squashed to `(-u2_max, u2_max)`.
#[derive(Clone, Debug)]
pub struct Controller {
    pub net: Mlp,
    pub u2_max: f64,
}

impl Controller {
    pub const GROUP: &'static str = "pi_controller";

    pub fn new(store: &mut ParamStore, hidden: usize, u2_max: f64, rng: &mut impl Rng) -> Self {
        assert!(u2_max > 0.0 && u2_max < FRAC_PI_2);
        let net = Mlp::new(
            store,
            Self::GROUP,
            &[LatentState::DIM, hidden, hidden, 2],
            Activation::Tanh,
            0.1,
            rng,
        );
        Self { net, u2_max }
    }

    /// Batched controls `[n, 2]` for states `[n, 4]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, state: Var) -> Result<Var> {
        let raw = self.net.forward(g, p, state)?;
        let u1 = g.slice_cols(raw, 0, 1)?;
        let steer_raw = g.slice_cols(raw, 1, 1)?;
        let squashed = g.tanh(steer_raw);
        let u2 = g.scale(squashed, self.u2_max);
        g.concat_cols(&[u1, u2])
    }

    pub fn apply(&self, store: &ParamStore, state: LatentState) -> Result<ControlInput> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let s = g.constant(LatentState::stack(&[state])?);
        let u = self.forward(&mut g, &p, s)?;
        let t = g.value(u);
        Ok(ControlInput::new(t.get2(0, 0), t.get2(0, 1)))
    }
}
