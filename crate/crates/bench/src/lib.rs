//! Shared fixtures for the benchmarks.

use lksde::scenario::{generate_benchmark, GenerationSpec};
use lksde::training::TrainConfig;
use lksde::Scenario;

/// `per_family` scenarios of each family at the default history length and horizon.
pub fn scenarios(per_family: usize) -> Vec<Scenario> {
    let cfg = TrainConfig::default();
    let spec = GenerationSpec {
        history_steps: cfg.history_steps,
        horizon: cfg.horizon,
        bicycle: cfg.bicycle,
    };
    generate_benchmark(&spec, per_family, 0.05, 7).expect("benchmark scenarios")
}
