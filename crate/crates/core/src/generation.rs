//! Inference-side tools: seeded generation with latent edits, latent sweeps,
//! steering estimation, and the evaluation report.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kinematics::slip_angle;
use crate::metrics::{
    accel_wasserstein, constant_velocity, forward_accelerations, jerk_profile, jerk_stats,
    mean_ade_fde, DisplacementError, GeneralizedPareto, JerkStats, SteeringSummary,
    JERK_VIOLATION_THRESHOLD,
};
use crate::networks::{waypoints, ForwardOptions, LatentOverrides, LkSdeModel, SceneBatch};
use crate::scenario::{derive_seed, Point, Scenario};
use crate::sde::sample_brownian;
use crate::training::predict_local;

/// Body of a generation request.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateRequest {
    pub scenario_id: Option<String>,
    pub scenario: Option<Scenario>,
    pub latent_overrides: Option<LatentOverrides>,
    pub noise_seed: u64,
    pub num_samples: Option<usize>,
    /// Multiplier on the Brownian increments; `0` gives the deterministic rollout.
    pub noise_scale: Option<f64>,
}

impl GenerateRequest {
    pub fn samples(&self) -> usize {
        self.num_samples.unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples() == 0 {
            return Err(Error::InvalidArgument(
                "num_samples must be at least 1".into(),
            ));
        }
        if self.samples() > MAX_SAMPLES {
            return Err(Error::InvalidArgument(format!(
                "num_samples must be at most {MAX_SAMPLES}"
            )));
        }
        if let Some(s) = self.noise_scale {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::InvalidArgument(
                    "noise_scale must be finite and >= 0".into(),
                ));
            }
        }
        if let Some(o) = &self.latent_overrides {
            o.validate()?;
        }
        Ok(())
    }
}

pub const MAX_SAMPLES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlEstimate {
    pub u1: f64,
    pub u2: f64,
    /// `u2 / u2_max`, in `(-1, 1)`.
    pub u2_normalized: f64,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryJerk {
    pub mean_abs_jerk: f64,
    pub max_abs_jerk: f64,
    pub violation: bool,
}

impl TrajectoryJerk {
    pub fn of(traj: &[Point], delta: f64) -> Result<Self> {
        let prof = jerk_profile(traj, delta)?;
        let max = prof.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            mean_abs_jerk: prof.iter().sum::<f64>() / prof.len() as f64,
            max_abs_jerk: max,
            violation: max > JERK_VIOLATION_THRESHOLD,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub scenario_id: String,
    /// World-frame waypoints, one sequence per sample.
    pub trajectories: Vec<Vec<Point>>,
    pub jerk: Vec<TrajectoryJerk>,
    /// Latent states `z_0..z_T` per sample.
    pub latent_traces: Vec<Vec<[f64; 4]>>,
    /// Controller readout at `z_0..z_{T-1}` per sample.
    pub controls: Vec<Vec<ControlEstimate>>,
}

/// Controller outputs along a sequence of latent states.
pub fn estimate_controls(model: &LkSdeModel, states: &[[f64; 4]]) -> Result<Vec<ControlEstimate>> {
    let u2_max = model.config.u2_max;
    states
        .iter()
        .map(|s| {
            let u = model
                .controller
                .apply(&model.store, crate::kinematics::LatentState::from_slice(s))?;
            Ok(ControlEstimate {
                u1: u.u1,
                u2: u.u2,
                u2_normalized: u.u2 / u2_max,
                beta: slip_angle(u.u2, &model.config.bicycle)?,
            })
        })
        .collect()
}

/// Encodes `scenario`, applies the overrides to the posterior mean and semantics,
/// and rolls out `num_samples` seeded LK-SDE paths.
pub fn generate(
    model: &LkSdeModel,
    scenario: &Scenario,
    req: &GenerateRequest,
) -> Result<GenerateResponse> {
    req.validate()?;
    let n = req.samples();
    let horizon = model.config.horizon;
    let delta = model.config.bicycle.delta;
    let scale = req.noise_scale.unwrap_or(1.0);
    let refs = vec![scenario; n];
    let batch = SceneBatch::new(&refs, &model.config)?;
    let paths = (0..n)
        .map(|i| {
            sample_brownian(horizon, delta, derive_seed(req.noise_seed, i as u64)).scaled(scale)
        })
        .collect();
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g);
    let out = model.forward(
        &mut g,
        &p,
        &batch,
        &ForwardOptions {
            posterior_noise: None,
            paths: Some(paths),
            with_bicycle: false,
            overrides: req.latent_overrides.clone(),
        },
    )?;
    let mut resp = GenerateResponse {
        scenario_id: scenario.id.clone(),
        trajectories: Vec::with_capacity(n),
        jerk: Vec::with_capacity(n),
        latent_traces: Vec::with_capacity(n),
        controls: Vec::with_capacity(n),
    };
    for r in 0..n {
        let local = out.trajectory(&g, r);
        resp.jerk.push(TrajectoryJerk::of(&local, delta)?);
        resp.trajectories
            .push(local.iter().map(|&q| scenario.frame.to_world(q)).collect());
        let trace: Vec<[f64; 4]> = out.lk.trace(&g, r).iter().map(|s| s.to_array()).collect();
        resp.controls
            .push(estimate_controls(model, &trace[..horizon])?);
        resp.latent_traces.push(trace);
    }
    Ok(resp)
}

/// A latent coordinate that can be swept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentComponent {
    X,
    Y,
    V,
    Psi,
    Sem(usize),
}

impl LatentComponent {
    pub fn overrides(self, value: f64, absolute: bool) -> LatentOverrides {
        let mut o = LatentOverrides {
            absolute,
            ..Default::default()
        };
        match self {
            Self::X => o.z0[0] = Some(value),
            Self::Y => o.z0[1] = Some(value),
            Self::V => o.z0[2] = Some(value),
            Self::Psi => o.z0[3] = Some(value),
            Self::Sem(i) => o.sem[i] = Some(value),
        }
        o
    }
}

impl FromStr for LatentComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "x" => Self::X,
            "y" => Self::Y,
            "v" => Self::V,
            "psi" => Self::Psi,
            _ => match s.strip_prefix("sem").and_then(|i| i.parse::<usize>().ok()) {
                Some(i) if i < crate::networks::SEM_DIM => Self::Sem(i),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown latent component {s:?} (expected x, y, v, psi, sem0..sem3)"
                    )))
                }
            },
        })
    }
}

/// Parses `start:stop:count` into `count` evenly spaced values.
pub fn parse_range(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("range {s:?} must look like start:stop:count"));
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts[..] else {
        return Err(bad());
    };
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect())
}

/// One scenario's trajectories across the sweep grid, in its local frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFan {
    pub scenario_id: String,
    pub values: Vec<f64>,
    pub trajectories: Vec<Vec<Point>>,
}

/// Deterministic rollouts for every grid value (offsets unless `absolute`).
pub fn sweep(
    model: &LkSdeModel,
    scenarios: &[Scenario],
    component: LatentComponent,
    values: &[f64],
    absolute: bool,
) -> Result<Vec<SweepFan>> {
    let mut fans: Vec<SweepFan> = scenarios
        .iter()
        .map(|s| SweepFan {
            scenario_id: s.id.clone(),
            values: values.to_vec(),
            trajectories: Vec::with_capacity(values.len()),
        })
        .collect();
    for part in scenarios.chunks(64).zip(fans.chunks_mut(64)) {
        let refs: Vec<&Scenario> = part.0.iter().collect();
        let batch = SceneBatch::new(&refs, &model.config)?;
        for &v in values {
            let mut g = Graph::new();
            let p = model.store.bind_frozen(&mut g);
            let out = model.forward(
                &mut g,
                &p,
                &batch,
                &ForwardOptions {
                    overrides: Some(component.overrides(v, absolute)),
                    ..Default::default()
                },
            )?;
            for (r, fan) in part.1.iter_mut().enumerate() {
                fan.trajectories.push(out.trajectory(&g, r));
            }
        }
    }
    Ok(fans)
}

/// Per-step controller readouts along zero-noise bicycle rollouts from the posterior mean.
pub fn steering_estimates(
    model: &LkSdeModel,
    scenarios: &[Scenario],
) -> Result<Vec<Vec<ControlEstimate>>> {
    let u2_max = model.config.u2_max;
    let mut out = Vec::with_capacity(scenarios.len());
    for part in scenarios.chunks(64) {
        let refs: Vec<&Scenario> = part.iter().collect();
        let batch = SceneBatch::new(&refs, &model.config)?;
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g);
        let f = model.forward(
            &mut g,
            &p,
            &batch,
            &ForwardOptions {
                with_bicycle: true,
                ..Default::default()
            },
        )?;
        let bike = f.bike.expect("bicycle rollout requested");
        for r in 0..part.len() {
            let steps = bike
                .controls
                .iter()
                .map(|&u| {
                    let row = g.value(u).row(r);
                    Ok(ControlEstimate {
                        u1: row[0],
                        u2: row[1],
                        u2_normalized: row[1] / u2_max,
                        beta: slip_angle(row[1], &model.config.bicycle)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(steps);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringReport {
    /// Normalized `u2` over every step of every scenario.
    pub u2: SteeringSummary,
    pub beta: SteeringSummary,
}

pub fn steering_histogram(
    model: &LkSdeModel,
    scenarios: &[Scenario],
    bins: usize,
) -> Result<SteeringReport> {
    let est = steering_estimates(model, scenarios)?;
    let u2: Vec<f64> = est.iter().flatten().map(|c| c.u2_normalized).collect();
    let beta: Vec<f64> = est.iter().flatten().map(|c| c.beta).collect();
    Ok(SteeringReport {
        u2: SteeringSummary::from_samples(&u2, bins)?,
        beta: SteeringSummary::from_samples(&beta, bins)?,
    })
}

/// Deterministic rollouts decoded to local waypoints, one per `(scenario, seed)` pair.
pub fn sample_local(
    model: &LkSdeModel,
    scenarios: &[Scenario],
    seed: u64,
    noise_scale: f64,
) -> Result<Vec<Vec<Point>>> {
    let horizon = model.config.horizon;
    let delta = model.config.bicycle.delta;
    let mut out = Vec::with_capacity(scenarios.len());
    for (ci, part) in scenarios.chunks(64).enumerate() {
        let refs: Vec<&Scenario> = part.iter().collect();
        let batch = SceneBatch::new(&refs, &model.config)?;
        let paths = (0..part.len())
            .map(|i| {
                let idx = (ci * 64 + i) as u64;
                sample_brownian(horizon, delta, derive_seed(seed, idx)).scaled(noise_scale)
            })
            .collect();
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g);
        let f = model.forward(
            &mut g,
            &p,
            &batch,
            &ForwardOptions {
                paths: Some(paths),
                ..Default::default()
            },
        )?;
        for r in 0..part.len() {
            out.push(waypoints(&g, f.decoded, part.len(), r));
        }
    }
    Ok(out)
}

/// Everything `eval` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenarios: usize,
    pub prediction: DisplacementError,
    pub constant_velocity: DisplacementError,
    /// Jerk of seeded generated trajectories.
    pub generated_jerk: JerkStats,
    pub ground_truth_jerk: JerkStats,
    /// W1 between generated and ground-truth forward accelerations.
    pub accel_w1_ground_truth: f64,
    pub accel_w1_pareto: Option<f64>,
    pub steering: SteeringReport,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    pub noise_scale: f64,
    pub bins: usize,
    pub pareto: Option<GeneralizedPareto>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            noise_scale: 1.0,
            bins: 50,
            pareto: None,
        }
    }
}

pub fn evaluate(
    model: &LkSdeModel,
    scenarios: &[Scenario],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let delta = model.config.bicycle.delta;
    let horizon = model.config.horizon;
    let truths: Vec<Vec<Point>> = scenarios.iter().map(|s| s.local_future()).collect();
    let preds = predict_local(model, scenarios, 64)?;
    let cv = scenarios
        .iter()
        .map(|s| constant_velocity(&s.local_history(), horizon))
        .collect::<Result<Vec<_>>>()?;
    let generated = sample_local(model, scenarios, opts.seed, opts.noise_scale)?;
    let gen_acc: Vec<f64> = generated
        .iter()
        .flat_map(|t| forward_accelerations(t, delta))
        .collect();
    let gt_acc: Vec<f64> = truths
        .iter()
        .flat_map(|t| forward_accelerations(t, delta))
        .collect();
    let accel_w1_pareto = match &opts.pareto {
        Some(gp) => {
            let reference = gp.sample(gen_acc.len().max(1000), derive_seed(opts.seed, 0xA11))?;
            Some(accel_wasserstein(&gen_acc, &reference)?.w1)
        }
        None => None,
    };
    Ok(EvalReport {
        scenarios: scenarios.len(),
        prediction: mean_ade_fde(&preds, &truths)?,
        constant_velocity: mean_ade_fde(&cv, &truths)?,
        generated_jerk: jerk_stats(&generated, delta, JERK_VIOLATION_THRESHOLD, opts.bins)?,
        ground_truth_jerk: jerk_stats(&truths, delta, JERK_VIOLATION_THRESHOLD, opts.bins)?,
        accel_w1_ground_truth: accel_wasserstein(&gen_acc, &gt_acc)?.w1,
        accel_w1_pareto,
        steering: steering_histogram(model, scenarios, opts.bins)?,
    })
}
