//! End-to-end acceptance checks. One line per criterion; nonzero exit if any fails.
//!
//! Run with `cargo test -p lksde-core --test acceptance`.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use lksde::generation::{
    generate, sample_local, steering_estimates, sweep, GenerateRequest, LatentComponent,
};
use lksde::gradcheck::{network_cases, op_cases, small_model_config};
use lksde::graph::Graph;
use lksde::kinematics::{bicycle_drift, slip_angle};
use lksde::metrics::{
    accel_wasserstein, ade_fde, constant_velocity, exceedance, jerk_profile, jerk_stats,
    mean_ade_fde, path_length, spearman, JERK_VIOLATION_THRESHOLD,
};
use lksde::networks::SceneBatch;
use lksde::scenario::{generate_benchmark, split, FamilyKind, GenerationSpec, Point, Scenario};
use lksde::sde::{kinematic_kl_loss, sample_brownian};
use lksde::training::{build_losses, evaluate_ade, train, BatchNoise, LossWeights, TrainConfig};
use lksde::{BicycleParams, ControlInput, LatentState, LkSdeModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut dead = Vec::new();
    for seed in 0..20 {
        let ops = op_cases(seed).map_err(|e| e.to_string())?;
        let nets = network_cases(seed).map_err(|e| e.to_string())?;
        let cases = ops
            .into_iter()
            .chain(nets.into_iter().map(|(n, r)| (n.to_string(), r)));
        for (name, r) in cases {
            if r.max_rel_error > worst {
                worst = r.max_rel_error;
                worst_name = name.clone();
            }
            if r.checked == 0 {
                dead.push(name);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && dead.is_empty() && secs < 60.0,
        format!("20 seeds, max rel err {worst:.2e} ({worst_name}), {secs:.1}s, unchecked {dead:?}"),
    )
}

fn kinematics() -> Outcome {
    let p = BicycleParams::default();
    let s0 = LatentState::new(0.0, 0.0, 10.0, 0.0);
    let mut err = 0.0f64;

    let beta = slip_angle(std::f64::consts::FRAC_PI_4, &p).map_err(|e| e.to_string())?;
    err = err.max((beta - 0.5f64.atan()).abs());

    let straight = bicycle_drift(s0, ControlInput::new(0.0, 0.0), &p).map_err(|e| e.to_string())?;
    for (a, b) in straight.to_array().iter().zip([1.0, 0.0, 10.0, 0.0]) {
        err = err.max((a - b).abs());
    }
    // tan(pi/4) = 1 so beta = atan(1/2): cos beta = 2/sqrt5, sin beta = 1/sqrt5.
    let r5 = 5f64.sqrt();
    let turn = bicycle_drift(s0, ControlInput::new(0.0, std::f64::consts::FRAC_PI_4), &p)
        .map_err(|e| e.to_string())?;
    for (a, b) in turn
        .to_array()
        .iter()
        .zip([2.0 / r5, 1.0 / r5, 10.0, 2.0 / (3.0 * r5)])
    {
        err = err.max((a - b).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut broken = 0;
    for _ in 0..10_000 {
        let s = LatentState::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(0.0..30.0),
            rng.random_range(-3.0..3.0),
        );
        let u2 = rng.random_range(-1.4..1.4);
        let a = bicycle_drift(s, ControlInput::new(0.0, u2), &p).unwrap();
        let mirrored = LatentState::new(s.x, -s.y, s.v, -s.psi);
        let b = bicycle_drift(mirrored, ControlInput::new(0.0, -u2), &p).unwrap();
        let speed_kept = a.v == s.v;
        let mirror = b.x == a.x && b.y == -a.y && b.v == a.v && b.psi == -a.psi;
        if !(speed_kept && mirror) {
            broken += 1;
        }
    }
    check(
        err < 1e-12 && broken == 0,
        format!("examples max abs err {err:.1e}; 10000 random cases, {broken} violations"),
    )
}

fn sde_statistics(model: &LkSdeModel, scenario: &Scenario) -> Outcome {
    let step_var = 0.1;
    let path = sample_brownian(25_000, step_var, 9);
    let draws: Vec<f64> = path.increments.iter().flatten().copied().collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let rel = (var - step_var).abs() / step_var;

    let run = |seed| {
        let req = GenerateRequest {
            scenario: Some(scenario.clone()),
            noise_seed: seed,
            noise_scale: Some(0.0),
            num_samples: Some(2),
            ..Default::default()
        };
        generate(model, scenario, &req).map(|r| {
            r.latent_traces
                .iter()
                .flatten()
                .flatten()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        })
    };
    let a = run(1).map_err(|e| e.to_string())?;
    let b = run(2).map_err(|e| e.to_string())?;
    check(
        rel < 0.05 && a == b,
        format!(
            "{} draws, variance {var:.5} vs {step_var} ({:.2}% off); zero-noise rollouts identical: {}",
            draws.len(),
            rel * 100.0,
            a == b
        ),
    )
}

fn kinematic_loss_contract() -> Outcome {
    let mut g = Graph::new();
    let f = g
        .constant(Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.1, 1.0, 1.0, 5.0, -0.2]).unwrap());
    let d = g.constant(Tensor::new(vec![2, 4], vec![0.5; 8]).unwrap());
    let zero = kinematic_kl_loss(&mut g, &[f], &[f], &[d], 2).map_err(|e| e.to_string())?;
    let zero = g.value(zero).data()[0];

    let a = g.scalar(5.0);
    let b = g.scalar(1.0);
    let two = g.scalar(2.0);
    let scalar = kinematic_kl_loss(&mut g, &[a], &[b], &[two], 1).map_err(|e| e.to_string())?;
    let scalar = g.value(scalar).data()[0];

    let cfg = small_model_config();
    let model = LkSdeModel::new(cfg.clone(), 3).map_err(|e| e.to_string())?;
    let spec = GenerationSpec {
        history_steps: cfg.history_steps,
        horizon: cfg.horizon,
        bicycle: cfg.bicycle,
    };
    let data = generate_benchmark(&spec, 1, 0.05, 4).map_err(|e| e.to_string())?;
    let refs: Vec<&Scenario> = data.iter().collect();
    let batch = SceneBatch::new(&refs, &cfg).map_err(|e| e.to_string())?;
    let noise = BatchNoise::sample(refs.len(), cfg.horizon, cfg.bicycle.delta, 6);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let weights = LossWeights {
        lambda_reg: 0.0,
        lambda_kin: 1.0,
        kin_reference: Default::default(),
    };
    let (_, losses) =
        build_losses(&model, &mut g, &p, &batch, &noise, &weights).map_err(|e| e.to_string())?;
    g.backward(losses.l_kin).map_err(|e| e.to_string())?;
    let grads = p.grads(&g);
    let norm = |group: &str| -> f64 {
        model
            .store
            .group(group)
            .iter()
            .flat_map(|id| grads[id.0].data().to_vec())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    };
    let (pi, f_drift) = (norm("pi_controller"), norm("f_drift"));
    check(
        zero == 0.0 && scalar == 2.0 && pi == 0.0 && f_drift > 0.0,
        format!("equal drifts {zero}; g=2 gap=4 -> {scalar}; |grad pi| {pi:.1e}, |grad f| {f_drift:.3e}"),
    )
}

struct Benchmark {
    train: Vec<Scenario>,
    val: Vec<Scenario>,
    test: Vec<Scenario>,
}

fn benchmark(cfg: &TrainConfig) -> Result<Benchmark, String> {
    let spec = GenerationSpec {
        history_steps: cfg.history_steps,
        horizon: cfg.horizon,
        bicycle: cfg.bicycle,
    };
    let all = generate_benchmark(&spec, 200, 0.05, 7).map_err(|e| e.to_string())?;
    let (train, val, test) = split(&all, [0.8, 0.1, 0.1], 1).map_err(|e| e.to_string())?;
    Ok(Benchmark { train, val, test })
}

fn learning(model: &LkSdeModel, data: &Benchmark, cfg: &TrainConfig, secs: f64) -> Outcome {
    let cv: Vec<Vec<Point>> = data
        .val
        .iter()
        .map(|s| constant_velocity(&s.local_history(), cfg.horizon))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let truths: Vec<Vec<Point>> = data.val.iter().map(|s| s.local_future()).collect();
    let baseline = mean_ade_fde(&cv, &truths).map_err(|e| e.to_string())?.ade;
    let ade = evaluate_ade(model, &data.val)
        .map_err(|e| e.to_string())?
        .ade;
    check(
        cfg.history_steps == 20 && cfg.horizon == 30 && ade <= 0.8 * baseline && secs < 1800.0,
        format!(
            "{} train / {} val scenarios, k={} T={}: val ADE {ade:.3} vs constant velocity {baseline:.3} (limit {:.3}); trained in {secs:.0}s",
            data.train.len(),
            data.val.len(),
            cfg.history_steps,
            cfg.horizon,
            0.8 * baseline
        ),
    )
}

fn generated(model: &LkSdeModel, scenarios: &[Scenario]) -> Result<Vec<Vec<Point>>, String> {
    let mut out = Vec::new();
    for seed in 0..5 {
        out.extend(sample_local(model, scenarios, 100 + seed, 1.0).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn smoothness(full: &LkSdeModel, ablation: &LkSdeModel, test: &[Scenario]) -> Outcome {
    let delta = full.config.bicycle.delta;
    let a = generated(full, test)?;
    let b = generated(ablation, test)?;
    let ja = jerk_stats(&a, delta, JERK_VIOLATION_THRESHOLD, 20).map_err(|e| e.to_string())?;
    let jb = jerk_stats(&b, delta, JERK_VIOLATION_THRESHOLD, 20).map_err(|e| e.to_string())?;
    check(
        a.len() >= 500 && a.len() == b.len() && ja.violation_rate <= jb.violation_rate,
        format!(
            "{} trajectories each: violation rate {:.3} (full) vs {:.3} (lambda_kin=0); mean jerk {:.1} vs {:.1}",
            a.len(),
            ja.violation_rate,
            jb.violation_rate,
            ja.mean_abs_jerk,
            jb.mean_abs_jerk
        ),
    )
}

fn of_family(scenarios: &[Scenario], pick: impl Fn(FamilyKind) -> bool) -> Vec<Scenario> {
    scenarios
        .iter()
        .filter(|s| s.family.is_some_and(&pick))
        .cloned()
        .collect()
}

fn controllability(model: &LkSdeModel, test: &[Scenario]) -> Outcome {
    let straight = of_family(test, |k| k == FamilyKind::Straight);
    let fans = sweep(
        model,
        &straight,
        LatentComponent::Psi,
        &[-1.0, 0.0, 1.0],
        false,
    )
    .map_err(|e| e.to_string())?;
    let mut agree = 0;
    let mut total = 0;
    for fan in &fans {
        let base = fan.trajectories[1].last().unwrap()[1];
        for (i, offset) in [(0, -1.0f64), (2, 1.0)] {
            let lateral = fan.trajectories[i].last().unwrap()[1] - base;
            total += 1;
            if lateral.signum() == offset.signum() {
                agree += 1;
            }
        }
    }
    let psi_rate = agree as f64 / total as f64;

    let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let fans =
        sweep(model, &straight, LatentComponent::V, &grid, false).map_err(|e| e.to_string())?;
    let rhos: Vec<f64> = fans
        .iter()
        .map(|f| {
            spearman(
                &f.values,
                &f.trajectories
                    .iter()
                    .map(|t| path_length(t))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let rho = rhos.iter().sum::<f64>() / rhos.len() as f64;
    check(
        psi_rate >= 0.9 && rho >= 0.9,
        format!(
            "{} straight scenarios: psi sign agreement {agree}/{total} ({:.0}%); v sweep mean Spearman {rho:.3}",
            straight.len(),
            psi_rate * 100.0
        ),
    )
}

fn steering(model: &LkSdeModel, test: &[Scenario]) -> Outcome {
    let estimates = steering_estimates(model, test).map_err(|e| e.to_string())?;
    let pooled: Vec<f64> = estimates
        .iter()
        .flatten()
        .map(|c| c.u2_normalized)
        .collect();
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let sd = (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let gather = |pick: &dyn Fn(FamilyKind) -> bool| -> Vec<f64> {
        test.iter()
            .zip(&estimates)
            .filter(|(s, _)| s.family.is_some_and(pick))
            .flat_map(|(_, e)| e.iter().map(|c| c.u2_normalized))
            .collect()
    };
    let straight = gather(&|k| k == FamilyKind::Straight);
    let turns = gather(&|k| k.is_turn());
    let straight_mean = straight.iter().sum::<f64>() / straight.len() as f64;
    let (es, et) = (
        exceedance(&straight, mean, sd),
        exceedance(&turns, mean, sd),
    );
    check(
        straight_mean.abs() < 0.05 && et > es,
        format!(
            "straight mean normalized u2 {straight_mean:+.4}; one-sigma exceedance turn {et:.3} vs straight {es:.3}"
        ),
    )
}

fn metric_oracles() -> Outcome {
    let affine: Vec<Point> = (0..10)
        .map(|t| [1.0 + 2.0 * t as f64, -3.0 + 0.5 * t as f64])
        .collect();
    let quadratic: Vec<Point> = (0..10)
        .map(|t| [(t * t) as f64, 2.0 * (t * t) as f64 - t as f64])
        .collect();
    let ja = jerk_profile(&affine, 0.1).map_err(|e| e.to_string())?;
    let jq = jerk_profile(&quadratic, 0.1).map_err(|e| e.to_string())?;
    let jerk_ok = ja.iter().chain(&jq).all(|&j| j == 0.0);

    let w_unit = accel_wasserstein(&[0.0], &[1.0])
        .map_err(|e| e.to_string())?
        .w1;
    let w_same = accel_wasserstein(&[0.5, -2.0, 3.0], &[3.0, 0.5, -2.0])
        .map_err(|e| e.to_string())?
        .w1;
    let w_ok = w_unit == 1.0 && w_same == 0.0;

    let same = ade_fde(&affine, &affine).map_err(|e| e.to_string())?;
    let shifted: Vec<Point> = affine.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
    let off = ade_fde(&affine, &shifted).map_err(|e| e.to_string())?;
    let disp_ok = same.ade == 0.0 && same.fde == 0.0 && off.ade == 5.0 && off.fde == 5.0;
    check(
        jerk_ok && w_ok && disp_ok,
        format!(
            "jerk affine/quadratic zero: {jerk_ok}; W1 {{0}} vs {{1}} = {w_unit}, permuted = {w_same}; ADE/FDE identical ({}, {}), offset 3-4-5 ({}, {})",
            same.ade, same.fde, off.ade, off.fde
        ),
    )
}

fn report(name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL {name}: {detail}");
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    report("gradient correctness", gradients(), &mut failures);
    report("kinematics exactness", kinematics(), &mut failures);
    report(
        "kinematic loss contract",
        kinematic_loss_contract(),
        &mut failures,
    );
    report("metric oracles", metric_oracles(), &mut failures);

    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml");
    let trained = TrainConfig::load(&root)
        .map_err(|e| e.to_string())
        .and_then(|cfg| {
            let data = benchmark(&cfg)?;
            let start = Instant::now();
            let full = train(&data.train, &data.val, &cfg, None, |_, _, _| {})
                .map_err(|e| e.to_string())?;
            let secs = start.elapsed().as_secs_f64();
            let ablation_cfg = TrainConfig {
                lambda_kin: 0.0,
                ..cfg.clone()
            };
            let ablation = train(&data.train, &data.val, &ablation_cfg, None, |_, _, _| {})
                .map_err(|e| e.to_string())?;
            Ok((cfg, data, full.model, ablation.model, secs))
        });

    match trained {
        Ok((cfg, data, full, ablation, secs)) => {
            report(
                "sde statistics",
                sde_statistics(&full, &data.test[0]),
                &mut failures,
            );
            report(
                "learning sanity",
                learning(&full, &data, &cfg, secs),
                &mut failures,
            );
            report(
                "smoothness direction",
                smoothness(&full, &ablation, &data.test),
                &mut failures,
            );
            report(
                "controllability",
                controllability(&full, &data.test),
                &mut failures,
            );
            report(
                "steering estimation",
                steering(&full, &data.test),
                &mut failures,
            );
        }
        Err(e) => {
            for name in [
                "sde statistics",
                "learning sanity",
                "smoothness direction",
                "controllability",
                "steering estimation",
            ] {
                report(name, Err(format!("training failed: {e}")), &mut failures);
            }
        }
    }

    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
