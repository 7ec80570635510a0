//! The optimisation pipeline: three losses, gradient routing, and the epoch loop.
//!
//! Every batch builds one graph and one weighted objective
//! `l_pred + lambda_reg * l_reg + lambda_kin * l_kin`, followed by a single backward
//! pass and optimizer step. Which parameter groups each loss may touch is enforced
//! with detached copies:
//!
//! * `l_reg` only sees the posterior, so it reaches the extractor and `e_s`.
//! * `l_kin` re-evaluates the drift and diffusion nets on detached latent states,
//!   semantics and contexts, against a detached bicycle drift, so it reaches only
//!   `f_drift` and `g_diff`. The reference drift is `h(z_t, pi(z_t))` along the
//!   latent path by default, or `h(s_t, pi(s_t))` along the bicycle rollout
//!   ([`KinReference`]).
//! * `l_pred` scores both decoded rollouts against ground truth. The bicycle
//!   branch is the path by which the controller learns.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kinematics::{bicycle_drift_graph, BicycleParams};
use crate::metrics::{mean_ade_fde, DisplacementError};
use crate::networks::{ForwardOptions, ForwardOutput, LkSdeModel, ModelConfig, SceneBatch};
use crate::params::{clip_grad_norm, Bound, Checkpoint, Optimizer, OptimizerKind};
use crate::scenario::{derive_seed, Point, Scenario};
use crate::sde::{kinematic_kl_loss, sample_brownian, BrownianPath};

/// Where the bicycle drift in `l_kin` is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KinReference {
    /// `h(z_t, pi(z_t))` on the neural SDE's own path: the drift gap of two SDEs
    /// compared along one trajectory.
    #[default]
    LatentPath,
    /// `h(s_t, pi(s_t))` along the separately rolled-out bicycle path.
    BicyclePath,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_kin: f64,
    pub kin_reference: KinReference,
}

/// Every knob of a training run. Serialises to the run configuration file (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub horizon: usize,
    pub history_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_reg: f64,
    pub lambda_kin: f64,
    pub kin_reference: KinReference,
    pub epochs: usize,
    pub seed: u64,
    pub g_min: f64,
    pub u2_max: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables.
    pub clip_grad_norm: f64,
    pub feature_width: usize,
    pub hidden: usize,
    pub controller_hidden: usize,
    pub lane_points: usize,
    pub latent_scale: f64,
    pub diffusion_init: f64,
    /// Write a checkpoint after every epoch, not just the best one.
    pub checkpoint_every_epoch: bool,
    pub bicycle: BicycleParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            horizon: m.horizon,
            history_steps: m.history_steps,
            batch_size: 32,
            learning_rate: 1e-3,
            lambda_reg: 0.1,
            lambda_kin: 1.0,
            kin_reference: KinReference::LatentPath,
            epochs: 20,
            seed: 0,
            g_min: m.g_min,
            u2_max: m.u2_max,
            optimizer: OptimizerKind::Sgd,
            clip_grad_norm: 10.0,
            feature_width: m.feature_width,
            hidden: m.hidden,
            controller_hidden: m.controller_hidden,
            lane_points: m.lane_points,
            latent_scale: m.latent_scale,
            diffusion_init: m.diffusion_init,
            checkpoint_every_epoch: true,
            bicycle: m.bicycle,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_reg: self.lambda_reg,
            lambda_kin: self.lambda_kin,
            kin_reference: self.kin_reference,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            history_steps: self.history_steps,
            horizon: self.horizon,
            feature_width: self.feature_width,
            hidden: self.hidden,
            controller_hidden: self.controller_hidden,
            lane_points: self.lane_points,
            g_min: self.g_min,
            u2_max: self.u2_max,
            latent_scale: self.latent_scale,
            diffusion_init: self.diffusion_init,
            bicycle: self.bicycle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_kin >= 0.0) {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Loss values of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub batch: usize,
    pub l_reg: f64,
    pub l_kin: f64,
    pub l_pred: f64,
    pub total: f64,
}

pub const LOSS_HISTORY_HEADER: &str = "epoch,batch,l_reg,l_kin,l_pred,total";

pub fn loss_history_csv(history: &[LossReport]) -> String {
    let mut out = format!("{LOSS_HISTORY_HEADER}\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.batch, r.l_reg, r.l_kin, r.l_pred, r.total
        ));
    }
    out
}

/// Mean of the elementwise smooth-L1 penalty over all waypoint coordinates.
pub fn smooth_l1(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let (ps, ts) = (g.shape(pred).to_vec(), g.shape(truth).to_vec());
    if ps != ts {
        return Err(Error::LengthMismatch {
            what: "smooth-l1 waypoints",
            expected: ts.iter().product(),
            actual: ps.iter().product(),
        });
    }
    let diff = g.sub(pred, truth)?;
    let pen = g.smooth_l1(diff);
    Ok(g.mean(pen))
}

/// Scalar loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub l_reg: Var,
    pub l_kin: Var,
    pub l_pred: Var,
    pub total: Var,
}

/// Random draws for one training batch.
#[derive(Clone, Debug)]
pub struct BatchNoise {
    pub posterior: Vec<[f64; 4]>,
    pub paths: Vec<BrownianPath>,
}

impl BatchNoise {
    pub fn sample(batch: usize, horizon: usize, step_var: f64, seed: u64) -> Self {
        let mut posterior = Vec::with_capacity(batch);
        let mut paths = Vec::with_capacity(batch);
        for i in 0..batch {
            let s = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut eps = [0.0; 4];
            for e in &mut eps {
                *e = StandardNormal.sample(&mut rng);
            }
            posterior.push(eps);
            paths.push(sample_brownian(horizon, step_var, derive_seed(s, 1)));
        }
        Self { posterior, paths }
    }
}

/// Builds the forward pass and the routed losses for one batch.
pub fn build_losses(
    model: &LkSdeModel,
    g: &mut Graph,
    p: &Bound,
    batch: &SceneBatch,
    noise: &BatchNoise,
    weights: &LossWeights,
) -> Result<(ForwardOutput, LossNodes)> {
    let truth = batch
        .truth
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("batch has no ground-truth futures".into()))?;
    let out = model.forward(
        g,
        p,
        batch,
        &ForwardOptions {
            posterior_noise: Some(noise.posterior.clone()),
            paths: Some(noise.paths.clone()),
            with_bicycle: true,
            overrides: None,
        },
    )?;
    let b = batch.size as f64;

    let kl = crate::networks::kl_regularizer(g, out.mean, out.log_var)?;
    let l_reg = g.scale(kl, 1.0 / b);

    // Kinematic loss on detached inputs: only f_drift and g_diff receive gradient.
    let steps = out.lk.steps();
    let z_prev = g.concat_rows(&out.lk.states[..steps])?;
    let z_prev = g.detach(z_prev);
    let sem = g.detach(out.sem);
    let sem_rep = g.concat_rows(&vec![sem; steps])?;
    let ctx = g.concat_rows(&out.ctx)?;
    let ctx = g.detach(ctx);
    let f = model.drift_net(g, p, z_prev, sem_rep, ctx)?;
    let diff = model.diffusion_net(g, p, z_prev)?;
    let bike = out.bike.as_ref().expect("bicycle rollout requested");
    let h = match weights.kin_reference {
        KinReference::LatentPath => {
            let u = model.controller.forward(g, p, z_prev)?;
            bicycle_drift_graph(g, z_prev, u, &model.config.latent_bicycle())?
        }
        KinReference::BicyclePath => g.concat_rows(&bike.drifts)?,
    };
    let h = g.detach(h);
    let l_kin = kinematic_kl_loss(g, &[f], &[h], &[diff], batch.size)?;

    let t = g.constant(truth.clone());
    let pred_lk = smooth_l1(g, out.decoded, t)?;
    let pred_bike = smooth_l1(g, out.decoded_bike.expect("bicycle decode"), t)?;
    let l_pred = g.add(pred_lk, pred_bike)?;

    let wr = g.scale(l_reg, weights.lambda_reg);
    let wk = g.scale(l_kin, weights.lambda_kin);
    let s1 = g.add(l_pred, wr)?;
    let total = g.add(s1, wk)?;
    Ok((
        out,
        LossNodes {
            l_reg,
            l_kin,
            l_pred,
            total,
        },
    ))
}

/// Owns the model and optimizer state across steps.
#[derive(Clone)]
pub struct Trainer {
    pub model: LkSdeModel,
    pub config: TrainConfig,
    optimizer: Optimizer,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = LkSdeModel::new(config.model_config(), config.seed)?;
        Ok(Self::with_model(model, config))
    }

    pub fn with_model(model: LkSdeModel, config: TrainConfig) -> Self {
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model.store);
        Self {
            model,
            config,
            optimizer,
        }
    }

    /// One pass of the pipeline over `batch`, followed by one optimizer step.
    pub fn train_step(
        &mut self,
        batch: &[&Scenario],
        epoch: usize,
        batch_index: usize,
    ) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let cfg = &self.config;
        let scenes = SceneBatch::new(batch, &self.model.config)?;
        let seed = derive_seed(cfg.seed, ((epoch as u64) << 32) | batch_index as u64);
        let noise = BatchNoise::sample(batch.len(), cfg.horizon, cfg.bicycle.delta, seed);

        let mut g = Graph::new();
        let p = self.model.store.bind(&mut g);
        let (_, losses) = build_losses(
            &self.model,
            &mut g,
            &p,
            &scenes,
            &noise,
            &cfg.loss_weights(),
        )?;
        let report = LossReport {
            epoch,
            batch: batch_index,
            l_reg: g.value(losses.l_reg).item(),
            l_kin: g.value(losses.l_kin).item(),
            l_pred: g.value(losses.l_pred).item(),
            total: g.value(losses.total).item(),
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                epoch,
                batch: batch_index,
            });
        }
        g.backward(losses.total)?;
        let mut grads = p.grads(&g);
        let norm = clip_grad_norm(&mut grads, cfg.clip_grad_norm);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                epoch,
                batch: batch_index,
            });
        }
        self.optimizer.step(&mut self.model.store, &mut grads);
        Ok(report)
    }

    /// Shuffled pass over `train`; returns one report per batch.
    pub fn train_epoch(&mut self, train: &[Scenario], epoch: usize) -> Result<Vec<LossReport>> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            0xE90C + epoch as u64,
        )));
        order
            .chunks(self.config.batch_size)
            .enumerate()
            .map(|(bi, chunk)| {
                let batch: Vec<&Scenario> = chunk.iter().map(|&i| &train[i]).collect();
                self.train_step(&batch, epoch, bi)
            })
            .collect()
    }
}

/// Deterministic predictions (posterior mean, zero noise) in each scenario's local frame.
pub fn predict_local(
    model: &LkSdeModel,
    scenarios: &[Scenario],
    chunk: usize,
) -> Result<Vec<Vec<Point>>> {
    let mut out = Vec::with_capacity(scenarios.len());
    for part in scenarios.chunks(chunk.max(1)) {
        let refs: Vec<&Scenario> = part.iter().collect();
        let batch = SceneBatch::new(&refs, &model.config)?;
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g);
        let f = model.forward(&mut g, &p, &batch, &ForwardOptions::default())?;
        for r in 0..part.len() {
            out.push(f.trajectory(&g, r));
        }
    }
    Ok(out)
}

/// World-frame predictions.
pub fn predict(model: &LkSdeModel, scenarios: &[Scenario]) -> Result<Vec<Vec<Point>>> {
    Ok(predict_local(model, scenarios, 64)?
        .into_iter()
        .zip(scenarios)
        .map(|(traj, s)| traj.into_iter().map(|p| s.frame.to_world(p)).collect())
        .collect())
}

pub fn evaluate_ade(model: &LkSdeModel, scenarios: &[Scenario]) -> Result<DisplacementError> {
    let preds = predict_local(model, scenarios, 64)?;
    let truths: Vec<Vec<Point>> = scenarios.iter().map(|s| s.local_future()).collect();
    mean_ade_fde(&preds, &truths)
}

impl LkSdeModel {
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "model": self.config,
            "run": extra,
        });
        Checkpoint::new(meta, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(
            ck.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing model configuration".into()))?,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = LkSdeModel::new(cfg, 0)?;
        model.store.load_named(&ck.params)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation ADE (the initial model when `epochs == 0`).
    pub model: LkSdeModel,
    pub history: Vec<LossReport>,
    pub val_ade: Vec<f64>,
    pub best_epoch: usize,
}

/// Files written by [`train`] into an output directory.
pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_epoch_{epoch:03}.json"))
}
pub const BEST_CHECKPOINT: &str = "best.json";
pub const INITIAL_CHECKPOINT: &str = "initial.json";
pub const LOSS_HISTORY_FILE: &str = "loss_history.csv";

/// Full training run. Epoch `0` in the checkpoint names is the untrained model.
///
/// With `out_dir` set, writes `initial.json`, a checkpoint per epoch (if enabled),
/// `best.json`, and `loss_history.csv`.
pub fn train(
    train_set: &[Scenario],
    val_set: &[Scenario],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(usize, &[LossReport], f64),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        trainer
            .model
            .to_checkpoint(serde_json::json!({"epoch": 0}))
            .save(&dir.join(INITIAL_CHECKPOINT))?;
    }
    let score = |m: &LkSdeModel| -> Result<f64> {
        if val_set.is_empty() {
            Ok(f64::NAN)
        } else {
            Ok(evaluate_ade(m, val_set)?.ade)
        }
    };
    let mut best = (trainer.model.clone(), score(&trainer.model)?, 0);
    let mut history = Vec::new();
    let mut val_ade = Vec::new();
    for epoch in 1..=config.epochs {
        let reports = trainer.train_epoch(train_set, epoch)?;
        let ade = score(&trainer.model)?;
        progress(epoch, &reports, ade);
        history.extend(reports);
        val_ade.push(ade);
        if let Some(dir) = out_dir {
            if config.checkpoint_every_epoch {
                trainer
                    .model
                    .to_checkpoint(serde_json::json!({"epoch": epoch, "val_ade": ade}))
                    .save(&checkpoint_path(dir, epoch))?;
            }
        }
        // Without a validation set the latest epoch wins.
        if ade.is_nan() || !(ade >= best.1) {
            best = (trainer.model.clone(), ade, epoch);
        }
    }
    if let Some(dir) = out_dir {
        best.0
            .to_checkpoint(serde_json::json!({"epoch": best.2, "val_ade": best.1}))
            .save(&dir.join(BEST_CHECKPOINT))?;
        let mut f = std::fs::File::create(dir.join(LOSS_HISTORY_FILE))?;
        f.write_all(loss_history_csv(&history).as_bytes())?;
    }
    Ok(TrainOutcome {
        model: best.0,
        history,
        val_ade,
        best_epoch: best.2,
    })
}
