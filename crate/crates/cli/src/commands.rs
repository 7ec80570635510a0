use std::collections::HashMap;
use std::fs;
use std::path::Path;

use lksde::generation::{
    evaluate, generate, parse_range, steering_histogram, sweep, EvalOptions, GenerateRequest,
    LatentComponent, SweepFan,
};
use lksde::metrics::{
    constant_velocity, jerk_stats, mean_ade_fde, DisplacementError, GeneralizedPareto, JerkStats,
    JERK_VIOLATION_THRESHOLD,
};
use lksde::networks::LatentOverrides;
use lksde::scenario::{
    generate_scenarios, load_dataset, save_dataset, split, FamilyKind, GenerationSpec, Point,
    ScenarioFamily,
};
use lksde::training::{predict, train, TrainConfig};
use lksde::{LkSdeModel, Scenario};
use serde::{Deserialize, Serialize};

use crate::cli::*;
use crate::error::{CliError, CliResult};

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text + "\n")?;
        }
        None => print_stdout(&text)?,
    }
    Ok(())
}

/// Like `println!`, but a closed pipe (`lksde generate | head`) is not an error.
fn print_stdout(text: &str) -> CliResult<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    match path {
        Some(p) => Ok(TrainConfig::load(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn load_model(path: &Path) -> CliResult<LkSdeModel> {
    LkSdeModel::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> CliResult<Vec<Scenario>> {
    let data =
        load_dataset(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if data.is_empty() {
        return Err(CliError::data(format!(
            "{}: dataset is empty",
            path.display()
        )));
    }
    Ok(data)
}

fn check_shape(model: &LkSdeModel, data: &[Scenario]) -> CliResult<()> {
    let (k, t) = (model.config.history_steps, model.config.horizon);
    match data
        .iter()
        .find(|s| s.history_len() != k || s.horizon() != t)
    {
        Some(s) => Err(CliError::data(format!(
            "scenario {} has {} history / {} future steps; the model expects {k} / {t}",
            s.id,
            s.history_len(),
            s.horizon()
        ))),
        None => Ok(()),
    }
}

pub fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref())?;
    let spec = GenerationSpec {
        history_steps: cfg.history_steps,
        horizon: cfg.horizon,
        bicycle: cfg.bicycle,
    };
    let kinds: Vec<FamilyKind> = if args.families.is_empty() {
        FamilyKind::ALL.to_vec()
    } else {
        args.families.iter().map(|&f| f.into()).collect()
    };
    let mut out = Vec::new();
    for kind in kinds {
        let family = ScenarioFamily::new(kind).with_noise(args.noise);
        // Same per-family seed streams as the benchmark generator, whatever subset is requested.
        let stream = 1000 + FamilyKind::ALL.iter().position(|&k| k == kind).unwrap() as u64;
        out.extend(generate_scenarios(
            &family,
            &spec,
            args.per_family,
            lksde::scenario::derive_seed(args.seed, stream),
        )?);
    }
    save_dataset(&out, &args.out)?;
    eprintln!("wrote {} scenarios to {}", out.len(), args.out.display());
    Ok(())
}

pub fn train_cmd(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if args.print_config {
        print_stdout(cfg.to_toml().trim_end())?;
        return Ok(());
    }
    let (Some(data), Some(out)) = (&args.data, &args.out) else {
        return Err(CliError::usage("--data and --out are required"));
    };
    let all = load_data(data)?;
    let (train_set, val_set) = match &args.val_data {
        Some(v) => (all, load_data(v)?),
        None => {
            let f = args.val_fraction;
            if !(0.0..1.0).contains(&f) {
                return Err(CliError::usage("--val-fraction must be in [0, 1)"));
            }
            let (tr, va, _) = split(&all, [1.0 - f, f, 0.0], args.split_seed)?;
            (tr, va)
        }
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    eprintln!(
        "training on {} scenarios, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let outcome = train(
        &train_set,
        &val_set,
        &cfg,
        Some(out),
        |epoch, reports, ade| {
            let n = reports.len().max(1) as f64;
            let mean = |f: fn(&lksde::LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
            eprintln!(
            "epoch {epoch:>3}  total {:.4}  l_pred {:.4}  l_kin {:.4}  l_reg {:.4}  val_ade {ade:.4}",
            mean(|r| r.total),
            mean(|r| r.l_pred),
            mean(|r| r.l_kin),
            mean(|r| r.l_reg),
        );
        },
    )?;
    eprintln!(
        "best epoch {} written to {}",
        outcome.best_epoch,
        out.join(lksde::training::BEST_CHECKPOINT).display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scenario_id: String,
    /// World-frame waypoints.
    pub trajectory: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub method: String,
    pub report: DisplacementError,
    pub predictions: Vec<Prediction>,
}

fn world_truths(data: &[Scenario]) -> Vec<Vec<Point>> {
    data.iter().map(|s| s.future_truth.clone()).collect()
}

pub fn predict_cmd(args: &PredictArgs) -> CliResult<DisplacementError> {
    let data = load_data(&args.data)?;
    let trajectories = match args.method {
        Method::Model => {
            let model = load_model(args.model.as_deref().expect("clap enforces --model"))?;
            check_shape(&model, &data)?;
            predict(&model, &data)?
        }
        Method::ConstantVelocity => data
            .iter()
            .map(|s| constant_velocity(&s.target_history, s.horizon()))
            .collect::<lksde::Result<_>>()?,
    };
    let report = mean_ade_fde(&trajectories, &world_truths(&data))?;
    let file = PredictionFile {
        method: format!("{:?}", args.method).to_lowercase(),
        report,
        predictions: data
            .iter()
            .zip(trajectories)
            .map(|(s, trajectory)| Prediction {
                scenario_id: s.id.clone(),
                trajectory,
            })
            .collect(),
    };
    write_json(&file, Some(&args.out))?;
    print_stdout(&serde_json::to_string(&report).expect("report serialises"))?;
    Ok(report)
}

fn parse_sets(sets: &[String], absolute: bool) -> CliResult<Option<LatentOverrides>> {
    if sets.is_empty() {
        return Ok(None);
    }
    let mut o = LatentOverrides {
        absolute,
        ..Default::default()
    };
    for s in sets {
        let (name, value) = s.split_once('=').ok_or_else(|| {
            CliError::usage(format!("--set {s:?} must look like component=value"))
        })?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("--set {s:?}: value is not a number")))?;
        let single = name
            .trim()
            .parse::<LatentComponent>()?
            .overrides(value, absolute);
        for (dst, src) in
            o.z0.iter_mut()
                .zip(single.z0)
                .chain(o.sem.iter_mut().zip(single.sem))
        {
            if src.is_some() {
                *dst = src;
            }
        }
    }
    Ok(Some(o))
}

pub fn generate_cmd(args: &GenerateArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let mut req: GenerateRequest = match &args.request {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::data(format!("{}: {e}", p.display())))?
        }
        None => GenerateRequest {
            scenario_id: args.scenario.clone(),
            latent_overrides: parse_sets(&args.set, args.absolute)?,
            noise_seed: args.seed,
            num_samples: Some(args.samples),
            noise_scale: args.noise_scale,
            ..Default::default()
        },
    };
    let scenarios = match &args.data {
        Some(p) => load_data(p)?,
        None => Vec::new(),
    };
    if req.scenario.is_none() && req.scenario_id.is_none() {
        match scenarios.first() {
            Some(s) => req.scenario_id = Some(s.id.clone()),
            None => return Err(CliError::usage("no scenario given")),
        }
    }
    let scenario = resolve(&req, &scenarios)?;
    check_shape(&model, std::slice::from_ref(&scenario))?;
    let resp = generate(&model, &scenario, &req)?;
    write_json(&resp, args.out.as_deref())
}

/// The request's inline scenario, or the dataset entry it names.
pub fn resolve(req: &GenerateRequest, scenarios: &[Scenario]) -> lksde::Result<Scenario> {
    if let Some(s) = &req.scenario {
        s.validate()?;
        return Ok(s.clone());
    }
    let id = req.scenario_id.as_deref().ok_or_else(|| {
        lksde::Error::InvalidArgument("request needs scenario_id or scenario".into())
    })?;
    scenarios
        .iter()
        .find(|s| s.id == id)
        .cloned()
        .ok_or_else(|| lksde::Error::UnknownScenario(id.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepFile {
    pub component: String,
    pub absolute: bool,
    pub values: Vec<f64>,
    /// Fans in each scenario's world frame.
    pub fans: Vec<SweepFan>,
}

pub fn sweep_cmd(args: &SweepArgs) -> CliResult<SweepFile> {
    let component: LatentComponent = args.component.parse()?;
    let values = parse_range(&args.range)?;
    let model = load_model(&args.model)?;
    let mut data = load_data(&args.data)?;
    if !args.scenarios.is_empty() {
        let by_id: HashMap<&str, &Scenario> = data.iter().map(|s| (s.id.as_str(), s)).collect();
        data = args
            .scenarios
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| CliError::data(format!("unknown scenario id {id:?}")))
            })
            .collect::<CliResult<_>>()?;
    }
    check_shape(&model, &data)?;
    let mut fans = sweep(&model, &data, component, &values, args.absolute)?;
    for (fan, s) in fans.iter_mut().zip(&data) {
        for t in &mut fan.trajectories {
            for p in t.iter_mut() {
                *p = s.frame.to_world(*p);
            }
        }
    }

    fs::create_dir_all(&args.out)?;
    let delta = model.config.bicycle.delta;
    let all: Vec<Vec<Point>> = fans.iter().flat_map(|f| f.trajectories.clone()).collect();
    let jerk: JerkStats = jerk_stats(&all, delta, JERK_VIOLATION_THRESHOLD, args.bins)?;
    let steering = steering_histogram(&model, &data, args.bins)?;
    fs::write(args.out.join("jerk_histogram.csv"), jerk.histogram.to_csv())?;
    fs::write(
        args.out.join("u2_histogram.csv"),
        steering.u2.histogram.to_csv(),
    )?;
    fs::write(
        args.out.join("beta_histogram.csv"),
        steering.beta.histogram.to_csv(),
    )?;
    let file = SweepFile {
        component: args.component.clone(),
        absolute: args.absolute,
        values,
        fans,
    };
    write_json(&file, Some(&args.out.join("sweep.json")))?;
    eprintln!(
        "{} scenarios x {} values written to {}",
        file.fans.len(),
        file.values.len(),
        args.out.display()
    );
    Ok(file)
}

/// Metrics of an externally produced set of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEval {
    pub scenarios: usize,
    pub method: String,
    pub prediction: DisplacementError,
    pub jerk: JerkStats,
}

pub fn eval_cmd(args: &EvalArgs) -> CliResult<serde_json::Value> {
    let data = load_data(&args.data)?;
    let value = if let Some(path) = &args.predictions {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let file: PredictionFile = serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let by_id: HashMap<&str, &Vec<Point>> = file
            .predictions
            .iter()
            .map(|p| (p.scenario_id.as_str(), &p.trajectory))
            .collect();
        let preds = data
            .iter()
            .map(|s| {
                by_id
                    .get(s.id.as_str())
                    .map(|t| (*t).clone())
                    .ok_or_else(|| CliError::data(format!("no prediction for scenario {:?}", s.id)))
            })
            .collect::<CliResult<Vec<_>>>()?;
        if args.delta.is_nan() || args.delta <= 0.0 {
            return Err(CliError::usage("--delta must be positive"));
        }
        let delta = args.delta;
        let report = PredictionEval {
            scenarios: data.len(),
            method: file.method,
            prediction: mean_ade_fde(&preds, &world_truths(&data))?,
            jerk: jerk_stats(&preds, delta, JERK_VIOLATION_THRESHOLD, args.bins)?,
        };
        serde_json::to_value(report).expect("report serialises")
    } else {
        let model = load_model(args.model.as_deref().expect("clap enforces --model"))?;
        check_shape(&model, &data)?;
        let pareto = match args.pareto.as_deref() {
            None => None,
            Some(&[shape, scale, location]) => Some(GeneralizedPareto {
                shape,
                scale,
                location,
            }),
            Some(_) => return Err(CliError::usage("--pareto takes shape,scale,location")),
        };
        let opts = EvalOptions {
            seed: args.seed,
            noise_scale: args.noise_scale,
            bins: args.bins,
            pareto,
        };
        serde_json::to_value(evaluate(&model, &data, &opts)?).expect("report serialises")
    };
    write_json(&value, args.out.as_deref())?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_sets_merge() {
        let sets = vec!["psi=0.5".to_string(), "v=-1".into(), "sem3=2".into()];
        let o = parse_sets(&sets, true).unwrap().unwrap();
        assert_eq!(o.z0, [None, None, Some(-1.0), Some(0.5)]);
        assert_eq!(o.sem[3], Some(2.0));
        assert!(o.absolute);
        assert!(parse_sets(&[], false).unwrap().is_none());
    }

    #[test]
    fn latent_sets_reject_garbage() {
        for bad in ["psi", "psi=abc", "yaw=1"] {
            assert_eq!(
                parse_sets(&[bad.to_string()], false).unwrap_err().code(),
                1,
                "{bad}"
            );
        }
    }
}
