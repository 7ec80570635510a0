//! Learned mappings of the model and the batched forward pass that wires them together.
//!
//! Parameter groups (name prefixes in the checkpoint): `extractor`, `e_s`, `e_c`,
//! `f_drift`, `g_diff`, `pi_controller`, `decoder`.
//!
//! The scene feature extractor encodes each agent history with a shared linear
//! temporal filter and mean-pools neighbours and lane polylines, so the feature
//! vector does not depend on how many of either a scene has.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kinematics::{BicycleParams, Controller, LatentState};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{Bound, ParamStore};
use crate::scenario::{Point, Pose, Scenario};
use crate::sde::{rollout_bicycle, rollout_lksde, stack_step, BrownianPath, LatentRollout};
use crate::tensor::Tensor;

pub const SEM_DIM: usize = 4;
pub const CTX_DIM: usize = 8;

pub const GROUPS: [&str; 7] = [
    "extractor",
    "e_s",
    "e_c",
    "f_drift",
    "g_diff",
    "pi_controller",
    "decoder",
];

/// Architecture and kinematic constants of a model. Stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub history_steps: usize,
    pub horizon: usize,
    pub feature_width: usize,
    pub hidden: usize,
    pub controller_hidden: usize,
    pub lane_points: usize,
    pub g_min: f64,
    pub u2_max: f64,
    /// Meters per latent length unit.
    pub latent_scale: f64,
    /// Initial output bias of the diffusion net, before the softplus.
    pub diffusion_init: f64,
    pub bicycle: BicycleParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history_steps: 20,
            horizon: 30,
            feature_width: 64,
            hidden: 64,
            controller_hidden: 32,
            lane_points: 10,
            g_min: 1e-3,
            u2_max: 0.6,
            latent_scale: 10.0,
            diffusion_init: -4.0,
            bicycle: BicycleParams::default(),
        }
    }
}

impl ModelConfig {
    /// Bicycle parameters in latent length units.
    pub fn latent_bicycle(&self) -> BicycleParams {
        self.bicycle.in_length_units(self.latent_scale)
    }

    pub fn validate(&self) -> Result<()> {
        self.bicycle.validate()?;
        let positive = [
            ("history_steps", self.history_steps),
            ("horizon", self.horizon),
            ("hidden", self.hidden),
            ("controller_hidden", self.controller_hidden),
            ("lane_points", self.lane_points),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.feature_width < 4 || !self.feature_width.is_multiple_of(4) {
            return Err(Error::InvalidArgument(
                "feature_width must be a positive multiple of 4".into(),
            ));
        }
        if !(self.g_min > 0.0) {
            return Err(Error::InvalidArgument("g_min must be positive".into()));
        }
        if !(self.u2_max > 0.0 && self.u2_max < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidArgument(
                "u2_max must lie in (0, pi/2)".into(),
            ));
        }
        if !(self.latent_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "latent_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed-width summary of a scene, produced by the feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFeatures {
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mean: [f64; 4],
    pub log_var: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextBundle {
    pub sem: [f64; SEM_DIM],
    /// One row of `CTX_DIM` values per future step.
    pub ctx: Vec<[f64; CTX_DIM]>,
}

/// Scenario inputs as constant matrices, in each scene's own frame and latent units.
#[derive(Clone, Debug)]
pub struct SceneBatch {
    pub size: usize,
    /// `[B, 2k]`
    pub target: Tensor,
    /// `[N, 2k]` and `[B, N]` mean-pooling weights; `None` when no scene has neighbours.
    pub neighbors: Option<(Tensor, Tensor)>,
    /// `[L, 2P]` and `[B, L]`.
    pub lanes: Option<(Tensor, Tensor)>,
    /// Local ground truth, meters, time-major `[T * B, 2]`; `None` if any scene lacks it.
    pub truth: Option<Tensor>,
    pub frames: Vec<Pose>,
}

fn fit_length(points: &[Point], k: usize) -> Vec<Point> {
    let mut out: Vec<Point> = points.iter().rev().take(k).rev().copied().collect();
    while out.len() < k {
        let first = out.first().copied().unwrap_or([0.0, 0.0]);
        out.insert(0, first);
    }
    out
}

/// `count` points spaced uniformly by arc length along `poly`.
pub fn resample_polyline(poly: &[Point], count: usize) -> Vec<Point> {
    if poly.len() < 2 {
        let p = poly.first().copied().unwrap_or([0.0, 0.0]);
        return vec![p; count];
    }
    let mut cum = vec![0.0];
    for w in poly.windows(2) {
        let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return vec![poly[0]; count];
    }
    let mut seg = 0;
    (0..count)
        .map(|i| {
            let s = if count == 1 {
                0.0
            } else {
                total * i as f64 / (count - 1) as f64
            };
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let span = cum[seg + 1] - cum[seg];
            let t = if span > 0.0 {
                ((s - cum[seg]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (a, b) = (poly[seg], poly[seg + 1]);
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

fn pooled_rows(per_scene: Vec<Vec<Vec<f64>>>, width: usize) -> Result<Option<(Tensor, Tensor)>> {
    let b = per_scene.len();
    let n: usize = per_scene.iter().map(|v| v.len()).sum();
    if n == 0 {
        return Ok(None);
    }
    let mut rows = Vec::with_capacity(n * width);
    let mut pool = vec![0.0; b * n];
    let mut j = 0;
    for (i, items) in per_scene.iter().enumerate() {
        let w = 1.0 / items.len().max(1) as f64;
        for item in items {
            rows.extend_from_slice(item);
            pool[i * n + j] = w;
            j += 1;
        }
    }
    Ok(Some((
        Tensor::matrix(n, width, rows)?,
        Tensor::matrix(b, n, pool)?,
    )))
}

impl SceneBatch {
    pub fn new(scenarios: &[&Scenario], config: &ModelConfig) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let k = config.history_steps;
        let scale = 1.0 / config.latent_scale;
        let flatten = |pose: &Pose, pts: &[Point]| -> Vec<f64> {
            pts.iter()
                .flat_map(|&p| {
                    let l = pose.to_local(p);
                    [l[0] * scale, l[1] * scale]
                })
                .collect()
        };
        let mut target = Vec::with_capacity(scenarios.len() * 2 * k);
        let mut neighbors = Vec::with_capacity(scenarios.len());
        let mut lanes = Vec::with_capacity(scenarios.len());
        for s in scenarios {
            if s.target_history.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "scenario {} has an empty target history",
                    s.id
                )));
            }
            target.extend(flatten(&s.frame, &fit_length(&s.target_history, k)));
            neighbors.push(
                s.neighbor_histories
                    .iter()
                    .filter(|h| !h.is_empty())
                    .map(|h| flatten(&s.frame, &fit_length(h, k)))
                    .collect(),
            );
            lanes.push(
                s.lanes
                    .iter()
                    .filter(|l| !l.is_empty())
                    .map(|l| flatten(&s.frame, &resample_polyline(l, config.lane_points)))
                    .collect(),
            );
        }
        let t = config.horizon;
        let truth = if scenarios.iter().all(|s| s.future_truth.len() == t) {
            let locals: Vec<Vec<Point>> = scenarios.iter().map(|s| s.local_future()).collect();
            let mut data = Vec::with_capacity(t * scenarios.len() * 2);
            for step in 0..t {
                for l in &locals {
                    data.extend_from_slice(&l[step]);
                }
            }
            Some(Tensor::matrix(t * scenarios.len(), 2, data)?)
        } else {
            None
        };
        Ok(Self {
            size: scenarios.len(),
            target: Tensor::matrix(scenarios.len(), 2 * k, target)?,
            neighbors: pooled_rows(neighbors, 2 * k)?,
            lanes: pooled_rows(lanes, 2 * config.lane_points)?,
            truth,
            frames: scenarios.iter().map(|s| s.frame).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    target: Linear,
    neighbor: Linear,
    lane: Linear,
}

impl FeatureExtractor {
    pub const GROUP: &'static str = "extractor";

    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let f = cfg.feature_width;
        let k2 = 2 * cfg.history_steps;
        Self {
            target: Linear::new(store, "extractor.target", k2, f / 2, 1.0, rng),
            neighbor: Linear::new(store, "extractor.neighbor", k2, f / 4, 1.0, rng),
            lane: Linear::new(
                store,
                "extractor.lane",
                2 * cfg.lane_points,
                f / 4,
                1.0,
                rng,
            ),
        }
    }

    fn pooled(
        g: &mut Graph,
        p: &Bound,
        layer: &Linear,
        items: &Option<(Tensor, Tensor)>,
        batch: usize,
    ) -> Result<Var> {
        match items {
            Some((rows, pool)) => {
                let r = g.constant(rows.clone());
                let enc = layer.forward(g, p, r)?;
                let act = g.tanh(enc);
                let w = g.constant(pool.clone());
                g.matmul(w, act)
            }
            None => Ok(g.constant(Tensor::zeros(&[batch, layer.fan_out]))),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &SceneBatch) -> Result<Var> {
        let t = g.constant(batch.target.clone());
        let te = self.target.forward(g, p, t)?;
        let target = g.tanh(te);
        let nb = Self::pooled(g, p, &self.neighbor, &batch.neighbors, batch.size)?;
        let ln = Self::pooled(g, p, &self.lane, &batch.lanes, batch.size)?;
        g.concat_cols(&[target, nb, ln])
    }
}

/// Residual context head producing `sem` and the per-step contexts.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    input: Linear,
    block: Linear,
    sem: Linear,
    ctx: Linear,
    pub horizon: usize,
}

impl ContextEncoder {
    pub const GROUP: &'static str = "e_c";

    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        Self {
            input: Linear::new(store, "e_c.input", cfg.feature_width, h, 1.0, rng),
            block: Linear::new(store, "e_c.block", h, h, 1.0, rng),
            sem: Linear::new(store, "e_c.sem", h, SEM_DIM, 0.5, rng),
            ctx: Linear::new(store, "e_c.ctx", h, cfg.horizon * CTX_DIM, 0.5, rng),
            horizon: cfg.horizon,
        }
    }

    /// Returns `sem` (`[B, 4]`) and one `[B, 8]` context per step.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let a = self.input.forward(g, p, x)?;
        let h1 = g.tanh(a);
        let b = self.block.forward(g, p, h1)?;
        let r = g.tanh(b);
        let h2 = g.add(h1, r)?;
        let sem = self.sem.forward(g, p, h2)?;
        let all = self.ctx.forward(g, p, h2)?;
        let ctx = (0..self.horizon)
            .map(|t| g.slice_cols(all, t * CTX_DIM, CTX_DIM))
            .collect::<Result<Vec<_>>>()?;
        Ok((sem, ctx))
    }
}

/// Optional edits applied to the encoded latent before rollout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentOverrides {
    /// Per-component `(x, y, v, psi)` values for the initial-state mean.
    pub z0: [Option<f64>; 4],
    pub sem: [Option<f64>; SEM_DIM],
    /// Replace the encoded values instead of offsetting them.
    pub absolute: bool,
}

impl LatentOverrides {
    pub fn is_empty(&self) -> bool {
        self.z0.iter().chain(&self.sem).all(|o| o.is_none())
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .z0
            .iter()
            .chain(&self.sem)
            .flatten()
            .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "latent overrides must be finite".into(),
            ))
        }
    }

    fn apply(&self, g: &mut Graph, v: Var, values: &[Option<f64>]) -> Result<Var> {
        if values.iter().all(|o| o.is_none()) {
            return Ok(v);
        }
        let (rows, cols) = g.value(v).dims2().expect("latent matrix");
        if self.absolute {
            let mut keep = Tensor::full(&[rows, cols], 1.0);
            let mut set = Tensor::zeros(&[rows, cols]);
            for r in 0..rows {
                for (c, o) in values.iter().enumerate() {
                    if let Some(val) = o {
                        keep.data_mut()[r * cols + c] = 0.0;
                        set.data_mut()[r * cols + c] = *val;
                    }
                }
            }
            let keep = g.constant(keep);
            let set = g.constant(set);
            let kept = g.mul(v, keep)?;
            g.add(kept, set)
        } else {
            let mut off = Tensor::zeros(&[rows, cols]);
            for r in 0..rows {
                for (c, o) in values.iter().enumerate() {
                    off.data_mut()[r * cols + c] = o.unwrap_or(0.0);
                }
            }
            let off = g.constant(off);
            g.add(v, off)
        }
    }
}

/// What a forward pass should sample and compute.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Standard-normal draws for the reparameterised initial state, one per scene.
    /// `None` uses the posterior mean.
    pub posterior_noise: Option<Vec<[f64; 4]>>,
    /// One Brownian path per scene; `None` runs the deterministic (zero-noise) rollout.
    pub paths: Option<Vec<BrownianPath>>,
    /// Also roll out and decode the bicycle-model SDE from the same initial state.
    pub with_bicycle: bool,
    pub overrides: Option<LatentOverrides>,
}

/// Graph handles produced by [`LkSdeModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub batch: usize,
    pub features: Var,
    pub mean: Var,
    pub log_var: Var,
    pub z0: Var,
    pub sem: Var,
    pub ctx: Vec<Var>,
    pub lk: LatentRollout,
    pub bike: Option<LatentRollout>,
    /// Decoded waypoints of the neural SDE, time-major `[T * B, 2]`, meters in scene frame.
    pub decoded: Var,
    pub decoded_bike: Option<Var>,
}

impl ForwardOutput {
    /// Local-frame waypoints of scene `row`.
    pub fn trajectory(&self, g: &Graph, row: usize) -> Vec<Point> {
        waypoints(g, self.decoded, self.batch, row)
    }
}

/// Extracts scene `row` from a time-major `[T * B, 2]` matrix.
pub fn waypoints(g: &Graph, stacked: Var, batch: usize, row: usize) -> Vec<Point> {
    let t = g.value(stacked);
    let steps = t.dims2().unwrap().0 / batch;
    (0..steps)
        .map(|s| {
            let r = t.row(s * batch + row);
            [r[0], r[1]]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LkSdeModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub extractor: FeatureExtractor,
    pub initial: Mlp,
    pub context: ContextEncoder,
    pub drift: Mlp,
    pub diffusion: Mlp,
    pub controller: Controller,
    pub decoder: Mlp,
}

impl LkSdeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let extractor = FeatureExtractor::new(&mut store, &config, &mut rng);
        let initial = Mlp::new(
            &mut store,
            "e_s",
            &[config.feature_width, h, h, 8],
            Activation::Tanh,
            0.5,
            &mut rng,
        );
        let context = ContextEncoder::new(&mut store, &config, &mut rng);
        let drift = Mlp::new(
            &mut store,
            "f_drift",
            &[4 + SEM_DIM + CTX_DIM, h, h, 4],
            Activation::Tanh,
            0.1,
            &mut rng,
        );
        let diffusion = Mlp::new(
            &mut store,
            "g_diff",
            &[4, h, h, 4],
            Activation::Tanh,
            0.1,
            &mut rng,
        );
        let out_bias = diffusion.layers.last().unwrap().b;
        store.get_mut(out_bias).fill(config.diffusion_init);
        let controller = Controller::new(
            &mut store,
            config.controller_hidden,
            config.u2_max,
            &mut rng,
        );
        let decoder = Mlp::new(
            &mut store,
            "decoder",
            &[4, h, h, 2],
            Activation::Tanh,
            0.1,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            extractor,
            initial,
            context,
            drift,
            diffusion,
            controller,
            decoder,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.ids().map(|id| self.store.get(id).numel()).sum()
    }

    pub fn features(&self, g: &mut Graph, p: &Bound, batch: &SceneBatch) -> Result<Var> {
        self.extractor.forward(g, p, batch)
    }

    /// Posterior `(mean, log_var)`, each `[B, 4]`; log-variance clamped to [-10, 10].
    pub fn encode_initial(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let out = self.initial.forward(g, p, x)?;
        let mean = g.slice_cols(out, 0, 4)?;
        let raw = g.slice_cols(out, 4, 4)?;
        Ok((mean, g.clamp(raw, -10.0, 10.0)))
    }

    pub fn encode_context(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        self.context.forward(g, p, x)
    }

    /// Next-state estimate `z + MLP([z, sem, ctx])`.
    pub fn drift_net(&self, g: &mut Graph, p: &Bound, z: Var, sem: Var, ctx: Var) -> Result<Var> {
        let input = g.concat_cols(&[z, sem, ctx])?;
        let step = self.drift.forward(g, p, input)?;
        g.add(z, step)
    }

    /// Positive diagonal diffusion `softplus(MLP(z)) + g_min`.
    pub fn diffusion_net(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let raw = self.diffusion.forward(g, p, z)?;
        let sp = g.softplus(raw);
        Ok(g.shift(sp, self.config.g_min))
    }

    /// Waypoints (meters) from latent states: `latent_scale * (x, y) + MLP(z)`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, states: Var) -> Result<Var> {
        let xy = g.slice_cols(states, 0, 2)?;
        let base = g.scale(xy, self.config.latent_scale);
        let correction = self.decoder.forward(g, p, states)?;
        g.add(base, correction)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &SceneBatch,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let b = batch.size;
        let horizon = self.config.horizon;
        let features = self.features(g, p, batch)?;
        let (mean, log_var) = self.encode_initial(g, p, features)?;
        let (mut sem, ctx) = self.encode_context(g, p, features)?;

        let mut centre = mean;
        if let Some(o) = &opts.overrides {
            o.validate()?;
            centre = o.apply(g, mean, &o.z0)?;
            sem = o.apply(g, sem, &o.sem)?;
        }
        let z0 = match &opts.posterior_noise {
            Some(noise) => {
                if noise.len() != b {
                    return Err(Error::LengthMismatch {
                        what: "posterior noise rows",
                        expected: b,
                        actual: noise.len(),
                    });
                }
                let eps = g.constant(Tensor::from_rows(noise)?);
                reparameterize(g, centre, log_var, eps)?
            }
            None => centre,
        };

        let noise: Vec<Var> = match &opts.paths {
            Some(paths) => {
                if paths.len() != b || paths.iter().any(|p| p.len() != horizon) {
                    return Err(Error::LengthMismatch {
                        what: "Brownian paths",
                        expected: horizon,
                        actual: paths.first().map(|p| p.len()).unwrap_or(0),
                    });
                }
                (0..horizon)
                    .map(|t| Ok(g.constant(stack_step(paths, t)?)))
                    .collect::<Result<_>>()?
            }
            None => {
                let zero = g.constant(Tensor::zeros(&[b, 4]));
                vec![zero; horizon]
            }
        };

        let lk = rollout_lksde(
            g,
            z0,
            sem,
            &ctx,
            &noise,
            &mut |g, z, s, c| self.drift_net(g, p, z, s, c),
            &mut |g, z| self.diffusion_net(g, p, z),
        )?;
        let stacked = g.concat_rows(&lk.states[1..])?;
        let decoded = self.decode(g, p, stacked)?;

        let (bike, decoded_bike) = if opts.with_bicycle {
            let params = self.config.latent_bicycle();
            let r = rollout_bicycle(
                g,
                z0,
                &noise,
                &mut |g, s| self.controller.forward(g, p, s),
                &params,
                &mut |g, s| self.diffusion_net(g, p, s),
            )?;
            let stacked = g.concat_rows(&r.states[1..])?;
            let d = self.decode(g, p, stacked)?;
            (Some(r), Some(d))
        } else {
            (None, None)
        };

        Ok(ForwardOutput {
            batch: b,
            features,
            mean,
            log_var,
            z0,
            sem,
            ctx,
            lk,
            bike,
            decoded,
            decoded_bike,
        })
    }

    /// Single-scene feature vector under the current parameters.
    pub fn extract_features(&self, scenario: &Scenario) -> Result<SceneFeatures> {
        let batch = SceneBatch::new(&[scenario], &self.config)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = self.features(&mut g, &p, &batch)?;
        Ok(SceneFeatures {
            x: g.value(x).data().to_vec(),
        })
    }

    pub fn posterior(&self, scenario: &Scenario) -> Result<LatentPosterior> {
        let batch = SceneBatch::new(&[scenario], &self.config)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = self.features(&mut g, &p, &batch)?;
        let (m, lv) = self.encode_initial(&mut g, &p, x)?;
        let arr = |t: &Tensor| [t.data()[0], t.data()[1], t.data()[2], t.data()[3]];
        Ok(LatentPosterior {
            mean: arr(g.value(m)),
            log_var: arr(g.value(lv)),
        })
    }

    pub fn context_bundle(&self, scenario: &Scenario) -> Result<ContextBundle> {
        let batch = SceneBatch::new(&[scenario], &self.config)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = self.features(&mut g, &p, &batch)?;
        let (sem, ctx) = self.encode_context(&mut g, &p, x)?;
        let s = g.value(sem).data();
        Ok(ContextBundle {
            sem: [s[0], s[1], s[2], s[3]],
            ctx: ctx
                .iter()
                .map(|&c| {
                    let mut row = [0.0; CTX_DIM];
                    row.copy_from_slice(g.value(c).data());
                    row
                })
                .collect(),
        })
    }

    /// Decodes explicit latent states (`z_1..z_T`) to local waypoints.
    pub fn decode_states(&self, states: &[LatentState]) -> Result<Vec<Point>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let s = g.constant(LatentState::stack(states)?);
        let d = self.decode(&mut g, &p, s)?;
        Ok(waypoints(&g, d, 1, 0))
    }
}

/// `mean + exp(log_var / 2) * noise`.
pub fn reparameterize(g: &mut Graph, mean: Var, log_var: Var, noise: Var) -> Result<Var> {
    let half = g.scale(log_var, 0.5);
    let sd = g.exp(half);
    let shock = g.mul(sd, noise)?;
    g.add(mean, shock)
}

/// Closed-form `KL(N(mean, exp(log_var)) || N(0, I))` summed over all entries.
pub fn kl_regularizer(g: &mut Graph, mean: Var, log_var: Var) -> Result<Var> {
    let m2 = g.square(mean);
    let var = g.exp(log_var);
    let a = g.add(m2, var)?;
    let b = g.sub(a, log_var)?;
    let c = g.shift(b, -1.0);
    let s = g.sum(c);
    Ok(g.scale(s, 0.5))
}

pub fn reparameterize_state(post: &LatentPosterior, noise: [f64; 4]) -> LatentState {
    let mut z = [0.0; 4];
    for i in 0..4 {
        z[i] = post.mean[i] + (0.5 * post.log_var[i]).exp() * noise[i];
    }
    LatentState::from_slice(&z)
}

pub fn kl_to_standard_normal(post: &LatentPosterior) -> f64 {
    (0..4)
        .map(|i| {
            let lv = post.log_var[i];
            0.5 * (post.mean[i].powi(2) + lv.exp() - lv - 1.0)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenarios, FamilyKind, GenerationSpec, ScenarioFamily};
    use rand_distr::{Distribution, StandardNormal};

    fn small_config() -> ModelConfig {
        ModelConfig {
            history_steps: 6,
            horizon: 4,
            feature_width: 16,
            hidden: 8,
            controller_hidden: 6,
            lane_points: 4,
            ..ModelConfig::default()
        }
    }

    fn scenes(cfg: &ModelConfig, n: usize) -> Vec<Scenario> {
        let spec = GenerationSpec {
            history_steps: cfg.history_steps,
            horizon: cfg.horizon,
            bicycle: cfg.bicycle,
        };
        generate_scenarios(&ScenarioFamily::new(FamilyKind::LeftTurn), &spec, n, 3).unwrap()
    }

    fn zero_model(cfg: ModelConfig) -> LkSdeModel {
        let mut m = LkSdeModel::new(cfg, 0).unwrap();
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.get_mut(id).fill(0.0);
        }
        m
    }

    #[test]
    fn features_are_deterministic_and_translation_invariant() {
        let cfg = small_config();
        let m = LkSdeModel::new(cfg.clone(), 1).unwrap();
        let s = &scenes(&cfg, 1)[0];
        let a = m.extract_features(s).unwrap();
        assert_eq!(a.x.len(), cfg.feature_width);
        assert_eq!(a, m.extract_features(s).unwrap());
        let b = m.extract_features(&s.translated(100.0, 100.0)).unwrap();
        for (u, v) in a.x.iter().zip(&b.x) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_neighbours_pool_to_zero() {
        let cfg = small_config();
        let m = LkSdeModel::new(cfg.clone(), 1).unwrap();
        let mut s = scenes(&cfg, 1).remove(0);
        s.neighbor_histories.clear();
        let f = m.extract_features(&s).unwrap();
        let w = cfg.feature_width;
        assert!(f.x[w / 2..w / 2 + w / 4].iter().all(|&v| v == 0.0));

        s.target_history.clear();
        assert!(m.extract_features(&s).is_err());
    }

    #[test]
    fn zero_weight_heads() {
        let cfg = small_config();
        let m = zero_model(cfg.clone());
        let s = &scenes(&cfg, 1)[0];
        let post = m.posterior(s).unwrap();
        assert_eq!(post.mean, [0.0; 4]);
        assert_eq!(post.log_var, [0.0; 4]);
        let ctx = m.context_bundle(s).unwrap();
        assert_eq!(ctx.ctx.len(), cfg.horizon);

        let mut g = Graph::new();
        let p = m.store.bind_frozen(&mut g);
        let z = g.constant(Tensor::from_rows(&[[0.3, -2.0, 5.0, 1.0]]).unwrap());
        let d = m.diffusion_net(&mut g, &p, z).unwrap();
        for v in g.value(d).data() {
            assert!((v - (2f64.ln() + cfg.g_min)).abs() < 1e-15);
        }
    }

    #[test]
    fn diffusion_respects_floor() {
        let cfg = small_config();
        let mut m = LkSdeModel::new(cfg.clone(), 5).unwrap();
        for id in m.store.group("g_diff") {
            m.store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v * 40.0 - 10.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<[f64; 4]> = (0..100_000)
            .map(|_| {
                let mut r = [0.0; 4];
                for v in &mut r {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v = 5.0 * n;
                }
                r
            })
            .collect();
        let mut g = Graph::new();
        let p = m.store.bind_frozen(&mut g);
        let z = g.constant(Tensor::from_rows(&rows).unwrap());
        let d = m.diffusion_net(&mut g, &p, z).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v >= cfg.g_min));
    }

    #[test]
    fn reparameterize_examples() {
        let post = LatentPosterior {
            mean: [1.0, -2.0, 0.5, 0.0],
            log_var: [0.0; 4],
        };
        assert_eq!(reparameterize_state(&post, [0.0; 4]).to_array(), post.mean);
        let z = reparameterize_state(&post, [0.5, 1.0, -1.0, 2.0]);
        assert_eq!(z.to_array(), [1.5, -1.0, -0.5, 2.0]);
    }

    #[test]
    fn reparameterized_moments() {
        let post = LatentPosterior {
            mean: [1.0, -2.0, 0.5, 3.0],
            log_var: [0.0, 1.0, -1.0, 0.5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let mut eps = [0.0; 4];
            for e in &mut eps {
                *e = StandardNormal.sample(&mut rng);
            }
            let z = reparameterize_state(&post, eps).to_array();
            for i in 0..4 {
                sum[i] += z[i];
                sq[i] += z[i] * z[i];
            }
        }
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let want = post.log_var[i].exp();
            assert!((mean - post.mean[i]).abs() < 0.05 * post.mean[i].abs().max(want.sqrt()));
            assert!((var - want).abs() / want < 0.05);
        }
    }

    #[test]
    fn kl_examples() {
        let kl = |mean, log_var| kl_to_standard_normal(&LatentPosterior { mean, log_var });
        assert_eq!(kl([0.0; 4], [0.0; 4]), 0.0);
        assert_eq!(kl([1.0, 0.0, 0.0, 0.0], [0.0; 4]), 0.5);
        assert!((kl([0.0; 4], [1.0; 4]) - 2.0 * (std::f64::consts::E - 2.0)).abs() < 1e-12);
        assert!((kl([0.0; 4], [1.0; 4]) - 1.43656).abs() < 1e-5);

        let mut g = Graph::new();
        let m = g.constant(Tensor::from_rows(&[[0.3, -1.0, 0.0, 2.0]]).unwrap());
        let lv = g.constant(Tensor::from_rows(&[[0.1, -0.5, 1.0, 0.0]]).unwrap());
        let v = kl_regularizer(&mut g, m, lv).unwrap();
        let want = kl([0.3, -1.0, 0.0, 2.0], [0.1, -0.5, 1.0, 0.0]);
        assert!((g.value(v).item() - want).abs() < 1e-14);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = small_config();
        let m = LkSdeModel::new(cfg.clone(), 2).unwrap();
        let data = scenes(&cfg, 3);
        let refs: Vec<&Scenario> = data.iter().collect();
        let batch = SceneBatch::new(&refs, &cfg).unwrap();
        let run = || {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g);
            let out = m
                .forward(
                    &mut g,
                    &p,
                    &batch,
                    &ForwardOptions {
                        with_bicycle: true,
                        ..Default::default()
                    },
                )
                .unwrap();
            assert_eq!(g.shape(out.decoded), &[cfg.horizon * 3, 2]);
            assert_eq!(g.shape(out.sem), &[3, SEM_DIM]);
            assert_eq!(out.ctx.len(), cfg.horizon);
            assert_eq!(out.lk.states.len(), cfg.horizon + 1);
            assert_eq!(out.bike.as_ref().unwrap().controls.len(), cfg.horizon);
            g.value(out.decoded).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resample_polyline_spacing() {
        let pts = resample_polyline(&[[0.0, 0.0], [1.0, 0.0], [1.0, 3.0]], 5);
        assert_eq!(pts[0], [0.0, 0.0]);
        assert_eq!(pts[4], [1.0, 3.0]);
        assert!((pts[1][0] - 1.0).abs() < 1e-12 && pts[1][1].abs() < 1e-12);
        assert!((pts[2][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overrides_shift_or_replace_mean() {
        let cfg = small_config();
        let m = zero_model(cfg.clone());
        let data = scenes(&cfg, 2);
        let refs: Vec<&Scenario> = data.iter().collect();
        let batch = SceneBatch::new(&refs, &cfg).unwrap();
        for absolute in [false, true] {
            let mut g = Graph::new();
            let p = m.store.bind_frozen(&mut g);
            let o = LatentOverrides {
                z0: [None, None, Some(0.8), Some(-0.5)],
                absolute,
                ..Default::default()
            };
            let out = m
                .forward(
                    &mut g,
                    &p,
                    &batch,
                    &ForwardOptions {
                        overrides: Some(o),
                        ..Default::default()
                    },
                )
                .unwrap();
            assert_eq!(g.value(out.z0).row(1), &[0.0, 0.0, 0.8, -0.5]);
        }
        let bad = LatentOverrides {
            z0: [Some(f64::NAN), None, None, None],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
