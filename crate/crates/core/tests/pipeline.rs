use std::collections::BTreeSet;

use lksde::gradcheck::small_model_config;
use lksde::graph::Graph;
use lksde::networks::{ForwardOptions, SceneBatch, GROUPS};
use lksde::params::{Checkpoint, OptimizerKind};
use lksde::scenario::{generate_scenarios, FamilyKind, GenerationSpec, Scenario, ScenarioFamily};
use lksde::training::{
    build_losses, loss_history_csv, train, BatchNoise, KinReference, LossNodes, LossWeights,
    TrainConfig, Trainer, LOSS_HISTORY_HEADER,
};
use lksde::{LkSdeModel, ModelConfig};

fn spec(cfg: &ModelConfig) -> GenerationSpec {
    GenerationSpec {
        history_steps: cfg.history_steps,
        horizon: cfg.horizon,
        bicycle: cfg.bicycle,
    }
}

fn scenes(cfg: &ModelConfig, kind: FamilyKind, n: usize, seed: u64) -> Vec<Scenario> {
    generate_scenarios(&ScenarioFamily::new(kind), &spec(cfg), n, seed).unwrap()
}

/// Parameter groups with at least one nonzero gradient entry after backward from `pick(losses)`.
fn touched(reference: KinReference, pick: fn(&LossNodes) -> lksde::Var) -> BTreeSet<&'static str> {
    let cfg = small_model_config();
    let model = LkSdeModel::new(cfg.clone(), 5).unwrap();
    let data = scenes(&cfg, FamilyKind::LeftTurn, 3, 1);
    let refs: Vec<&Scenario> = data.iter().collect();
    let batch = SceneBatch::new(&refs, &cfg).unwrap();
    let noise = BatchNoise::sample(3, cfg.horizon, cfg.bicycle.delta, 8);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let weights = LossWeights {
        lambda_reg: 1.0,
        lambda_kin: 1.0,
        kin_reference: reference,
    };
    let (_, losses) = build_losses(&model, &mut g, &p, &batch, &noise, &weights).unwrap();
    g.backward(pick(&losses)).unwrap();
    let grads = p.grads(&g);
    GROUPS
        .iter()
        .copied()
        .filter(|group| {
            model
                .store
                .group(group)
                .iter()
                .any(|id| grads[id.0].data().iter().any(|&v| v != 0.0))
        })
        .collect()
}

#[test]
fn each_loss_reaches_only_its_groups() {
    for reference in [KinReference::LatentPath, KinReference::BicyclePath] {
        assert_eq!(
            touched(reference, |l| l.l_reg),
            BTreeSet::from(["extractor", "e_s"])
        );
        assert_eq!(
            touched(reference, |l| l.l_kin),
            BTreeSet::from(["f_drift", "g_diff"])
        );
        assert_eq!(
            touched(reference, |l| l.l_pred),
            GROUPS.iter().copied().collect::<BTreeSet<_>>()
        );
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small_model_config();
    let model = LkSdeModel::new(cfg.clone(), 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model
        .to_checkpoint(serde_json::json!({"note": "x"}))
        .save(&path)
        .unwrap();
    let loaded = LkSdeModel::load(&path).unwrap();
    assert_eq!(loaded.config, model.config);

    let data = scenes(&cfg, FamilyKind::LaneChange, 4, 3);
    let refs: Vec<&Scenario> = data.iter().collect();
    let batch = SceneBatch::new(&refs, &cfg).unwrap();
    let noise = BatchNoise::sample(4, cfg.horizon, cfg.bicycle.delta, 2);
    let run = |m: &LkSdeModel| {
        let mut g = Graph::new();
        let p = m.store.bind_frozen(&mut g);
        let out = m
            .forward(
                &mut g,
                &p,
                &batch,
                &ForwardOptions {
                    posterior_noise: Some(noise.posterior.clone()),
                    paths: Some(noise.paths.clone()),
                    with_bicycle: true,
                    overrides: None,
                },
            )
            .unwrap();
        let a: Vec<u64> = g
            .value(out.decoded)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let b: Vec<u64> = g
            .value(out.decoded_bike.unwrap())
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        (a, b)
    };
    assert_eq!(run(&model), run(&loaded));

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(
        Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(),
        bytes
    );
}

#[test]
fn loss_history_has_one_row_per_batch() {
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let cfg = TrainConfig {
        horizon: 4,
        history_steps: 6,
        feature_width: 8,
        hidden: 6,
        controller_hidden: 6,
        lane_points: 3,
        ..cfg
    };
    let data = scenes(&cfg.model_config(), FamilyKind::Straight, 10, 2);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&data, &data[..3], &cfg, Some(dir.path()), |_, _, _| {}).unwrap();
    // 10 scenarios in batches of 4: three batches per epoch.
    assert_eq!(out.history.len(), 3 * 3);
    assert_eq!(out.val_ade.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("loss_history.csv")).unwrap();
    assert_eq!(csv, loss_history_csv(&out.history));
    assert_eq!(csv.lines().next().unwrap(), LOSS_HISTORY_HEADER);
    assert_eq!(csv.lines().count(), 10);
    for e in 1..=3 {
        assert!(dir
            .path()
            .join(format!("checkpoint_epoch_{e:03}.json"))
            .exists());
    }
    let best = LkSdeModel::load(&dir.path().join("best.json")).unwrap();
    assert_eq!(best.store.to_named(), out.model.store.to_named());
}

#[test]
fn straight_dataset_is_learned() {
    // 50 straight scenarios, batches of 10: 500 steps is 100 epochs.
    let cfg = TrainConfig {
        batch_size: 10,
        ..benchmark_config()
    };
    let data = scenes(&cfg.model_config(), FamilyKind::Straight, 50, 11);
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut history = Vec::new();
    for epoch in 1..=100 {
        history.extend(trainer.train_epoch(&data, epoch).unwrap());
    }
    assert_eq!(history.len(), 500);
    let first = history[0].l_pred;
    let last = history[history.len() - 1].l_pred;
    assert!(last < 0.1 * first, "l_pred {first} -> {last}");
}

fn benchmark_config() -> TrainConfig {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    TrainConfig::load(&root.join("benchmark.toml")).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn l_pred_decreases_on_every_family() {
    let cfg = benchmark_config();
    for kind in FamilyKind::ALL {
        let data = scenes(&cfg.model_config(), kind, 64, 5);
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let mut l_pred = Vec::new();
        for epoch in 1..=10 {
            l_pred.extend(
                trainer
                    .train_epoch(&data, epoch)
                    .unwrap()
                    .iter()
                    .map(|r| r.l_pred),
            );
        }
        let k = l_pred.len() / 10;
        let head = median(l_pred[..k].to_vec());
        let tail = median(l_pred[l_pred.len() - k..].to_vec());
        assert!(tail < head, "{kind}: {head} -> {tail}");
    }
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = TrainConfig::load(&root.join("default.toml")).unwrap();
    assert_eq!(default, TrainConfig::default());
    let bench = TrainConfig::load(&root.join("benchmark.toml")).unwrap();
    assert_eq!(bench.optimizer, OptimizerKind::Adam);
}
