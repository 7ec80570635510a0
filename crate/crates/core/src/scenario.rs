//! Synthetic driving scenarios: generation, the dataset file, and splitting.
//!
//! Every generated path is a rollout of the kinematic bicycle model under a
//! scripted control schedule, so noiseless ground truth is kinematically
//! feasible by construction. Observation noise is added to the recorded
//! waypoints afterwards.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{bicycle_drift, BicycleParams, ControlInput, LatentState};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

pub type Point = [f64; 2];

/// Reference pose that defines a scenario's relative frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    /// Last observed point, heading taken from the displacement over up to five steps.
    pub fn from_history(history: &[Point]) -> Result<Self> {
        let last = *history
            .last()
            .ok_or_else(|| Error::InvalidArgument("empty target history".into()))?;
        let back = history.len().saturating_sub(6);
        let first = history[back];
        let (dx, dy) = (last[0] - first[0], last[1] - first[1]);
        let heading = if dx.hypot(dy) > 1e-6 {
            dy.atan2(dx)
        } else {
            0.0
        };
        Ok(Self {
            x: last[0],
            y: last[1],
            heading,
        })
    }

    /// World point expressed in this frame (origin at the pose, +x along the heading).
    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Straight,
    LaneChange,
    LeftTurn,
    RightTurn,
    StopAndGo,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 5] = [
        FamilyKind::Straight,
        FamilyKind::LaneChange,
        FamilyKind::LeftTurn,
        FamilyKind::RightTurn,
        FamilyKind::StopAndGo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Straight => "straight",
            FamilyKind::LaneChange => "lane-change",
            FamilyKind::LeftTurn => "left-turn",
            FamilyKind::RightTurn => "right-turn",
            FamilyKind::StopAndGo => "stop-and-go",
        }
    }

    pub fn is_turn(self) -> bool {
        matches!(self, FamilyKind::LeftTurn | FamilyKind::RightTurn)
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FamilyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    /// Maneuver family that produced the scenario, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyKind>,
    pub target_history: Vec<Point>,
    pub neighbor_histories: Vec<Vec<Point>>,
    pub lanes: Vec<Vec<Point>>,
    pub future_truth: Vec<Point>,
    pub frame: Pose,
}

impl Scenario {
    pub fn history_len(&self) -> usize {
        self.target_history.len()
    }

    pub fn horizon(&self) -> usize {
        self.future_truth.len()
    }

    /// Ground-truth future in the scenario frame.
    pub fn local_future(&self) -> Vec<Point> {
        self.future_truth
            .iter()
            .map(|&p| self.frame.to_local(p))
            .collect()
    }

    pub fn local_history(&self) -> Vec<Point> {
        self.target_history
            .iter()
            .map(|&p| self.frame.to_local(p))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |pts: &[Point]| pts.iter().flatten().all(|v| v.is_finite());
        if self.target_history.is_empty() {
            return Err(Error::InvalidArgument("empty target_history".into()));
        }
        if self.future_truth.is_empty() {
            return Err(Error::InvalidArgument("empty future_truth".into()));
        }
        let all_finite = finite(&self.target_history)
            && finite(&self.future_truth)
            && self.neighbor_histories.iter().all(|n| finite(n))
            && self.lanes.iter().all(|l| finite(l))
            && [self.frame.x, self.frame.y, self.frame.heading]
                .iter()
                .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        Ok(())
    }

    /// Same scenario shifted by `(dx, dy)` in world coordinates.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let shift = |pts: &[Point]| pts.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        Self {
            id: self.id.clone(),
            family: self.family,
            target_history: shift(&self.target_history),
            neighbor_histories: self.neighbor_histories.iter().map(|n| shift(n)).collect(),
            lanes: self.lanes.iter().map(|l| shift(l)).collect(),
            future_truth: shift(&self.future_truth),
            frame: Pose {
                x: self.frame.x + dx,
                y: self.frame.y + dy,
                heading: self.frame.heading,
            },
        }
    }
}

/// Parameters of one maneuver family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFamily {
    pub kind: FamilyKind,
    /// Standard deviation of additive waypoint noise, meters.
    pub noise_level: f64,
    /// Initial speed range, m/s.
    pub speed_range: (f64, f64),
    /// Peak steering angle range (rad) for steering families, deceleration range (m/s^2) for stop-and-go.
    pub curvature_range: (f64, f64),
}

impl ScenarioFamily {
    pub fn new(kind: FamilyKind) -> Self {
        let (speed_range, curvature_range) = match kind {
            FamilyKind::Straight => ((5.0, 15.0), (0.0, 0.0)),
            FamilyKind::LaneChange => ((8.0, 15.0), (0.02, 0.05)),
            FamilyKind::LeftTurn | FamilyKind::RightTurn => ((5.0, 10.0), (0.06, 0.15)),
            FamilyKind::StopAndGo => ((6.0, 12.0), (1.5, 3.0)),
        };
        Self {
            kind,
            noise_level: 0.05,
            speed_range,
            curvature_range,
        }
    }

    pub fn with_noise(mut self, noise_level: f64) -> Self {
        self.noise_level = noise_level;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.speed_range;
        if !(lo >= 0.0 && hi > lo) {
            return Err(Error::InvalidArgument(format!(
                "degenerate speed range {:?}",
                self.speed_range
            )));
        }
        let (clo, chi) = self.curvature_range;
        let needs_range = self.kind != FamilyKind::Straight;
        if needs_range && !(clo >= 0.0 && chi > clo) {
            return Err(Error::InvalidArgument(format!(
                "degenerate curvature range {:?}",
                self.curvature_range
            )));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::InvalidArgument("negative noise level".into()));
        }
        Ok(())
    }
}

/// Shape of the generated scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub history_steps: usize,
    pub horizon: usize,
    pub bicycle: BicycleParams,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self {
            history_steps: 20,
            horizon: 30,
            bicycle: BicycleParams::default(),
        }
    }
}

const LANE_WIDTH: f64 = 3.5;

/// Mixes a base seed with a stream index (splitmix64 finaliser).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn control_schedule(
    family: &ScenarioFamily,
    spec: &GenerationSpec,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ControlInput> {
    let k = spec.history_steps as f64;
    let (clo, chi) = family.curvature_range;
    let draw_mag = |rng: &mut ChaCha8Rng| {
        if chi > clo {
            rng.random_range(clo..chi)
        } else {
            clo
        }
    };
    match family.kind {
        FamilyKind::Straight => vec![ControlInput::default(); steps],
        FamilyKind::LaneChange => {
            let onset = rng.random_range(k - 8.0..k + 4.0);
            let period = rng.random_range(20.0..30.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let amp = sign * draw_mag(rng);
            (0..steps)
                .map(|i| {
                    let t = i as f64 - onset;
                    let u2 = if (0.0..period).contains(&t) {
                        amp * (2.0 * PI * t / period).sin()
                    } else {
                        0.0
                    };
                    ControlInput::new(0.0, u2)
                })
                .collect()
        }
        FamilyKind::LeftTurn | FamilyKind::RightTurn => {
            let onset = rng.random_range(k - 10.0..k + 5.0);
            let sign = if family.kind == FamilyKind::LeftTurn {
                1.0
            } else {
                -1.0
            };
            let peak = sign * draw_mag(rng);
            (0..steps)
                .map(|i| {
                    let t = i as f64 - onset;
                    let ramp = (t / 5.0).clamp(0.0, 1.0);
                    ControlInput::new(0.0, peak * ramp)
                })
                .collect()
        }
        FamilyKind::StopAndGo => {
            let onset = rng.random_range(k - 12.0..k + 2.0);
            let brake = draw_mag(rng);
            let brake_len = rng.random_range(10.0..18.0);
            let pause = rng.random_range(0.0..6.0);
            (0..steps)
                .map(|i| {
                    let t = i as f64 - onset;
                    let u1 = if (0.0..brake_len).contains(&t) {
                        -brake
                    } else if t >= brake_len + pause {
                        0.6 * brake
                    } else {
                        0.0
                    };
                    ControlInput::new(u1, 0.0)
                })
                .collect()
        }
    }
}

/// Integrates the bicycle model; speed is kept non-negative.
fn integrate(
    start: LatentState,
    controls: &[ControlInput],
    params: &BicycleParams,
) -> Result<Vec<LatentState>> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut s = start;
    states.push(s);
    for &u in controls {
        s = bicycle_drift(s, u, params)?;
        s.v = s.v.max(0.0);
        states.push(s);
    }
    Ok(states)
}

fn polyline_every(states: &[LatentState], stride: usize) -> Vec<Point> {
    let mut pts: Vec<Point> = states.iter().step_by(stride).map(|s| [s.x, s.y]).collect();
    let last = states.last().map(|s| [s.x, s.y]);
    if let Some(l) = last {
        if pts.last() != Some(&l) {
            pts.push(l);
        }
    }
    pts
}

fn generate_one(
    family: &ScenarioFamily,
    spec: &GenerationSpec,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<Scenario> {
    let k = spec.history_steps;
    let total = k + spec.horizon;
    let lane_extra = 10;
    let start = LatentState::new(
        rng.random_range(-100.0..100.0),
        rng.random_range(-100.0..100.0),
        rng.random_range(family.speed_range.0..family.speed_range.1),
        rng.random_range(-PI..PI),
    );
    let controls = control_schedule(family, spec, total + lane_extra - 1, rng);
    let states = integrate(start, &controls, &spec.bicycle)?;

    let noise = Normal::new(0.0, family.noise_level.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let observe = |s: &LatentState, rng: &mut ChaCha8Rng| -> Point {
        if family.noise_level > 0.0 {
            [s.x + noise.sample(rng), s.y + noise.sample(rng)]
        } else {
            [s.x, s.y]
        }
    };
    let target_history: Vec<Point> = states[..k].iter().map(|s| observe(s, rng)).collect();
    let future_truth: Vec<Point> = states[k..total].iter().map(|s| observe(s, rng)).collect();

    // Driven centreline plus the straight lane the vehicle started in.
    let centreline = polyline_every(&states, 2);
    let (sin0, cos0) = start.psi.sin_cos();
    let length: f64 = states
        .windows(2)
        .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
        .sum();
    let straight: Vec<Point> = (0..=10)
        .map(|i| {
            let d = length * i as f64 / 10.0;
            [start.x + d * cos0, start.y + d * sin0]
        })
        .collect();
    let lanes = vec![centreline, straight];

    let neighbours = rng.random_range(0..=3usize);
    let mut neighbor_histories = Vec::with_capacity(neighbours);
    for _ in 0..neighbours {
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let along = rng.random_range(-15.0..15.0);
        let n0 = LatentState::new(
            start.x + along * cos0 - side * LANE_WIDTH * sin0,
            start.y + along * sin0 + side * LANE_WIDTH * cos0,
            rng.random_range(family.speed_range.0..family.speed_range.1),
            start.psi,
        );
        let path = integrate(n0, &vec![ControlInput::default(); k - 1], &spec.bicycle)?;
        neighbor_histories.push(path.iter().map(|s| observe(s, rng)).collect());
    }

    let frame = Pose::from_history(&target_history)?;
    Ok(Scenario {
        id,
        family: Some(family.kind),
        target_history,
        neighbor_histories,
        lanes,
        future_truth,
        frame,
    })
}

/// `count` scenarios of one family; identical for identical `(family, spec, count, seed)`.
pub fn generate_scenarios(
    family: &ScenarioFamily,
    spec: &GenerationSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Scenario>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if spec.history_steps < 2 || spec.horizon < 1 {
        return Err(Error::InvalidArgument(
            "need at least 2 history steps and 1 future step".into(),
        ));
    }
    family.validate()?;
    spec.bicycle.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            generate_one(family, spec, format!("{}-{i:05}", family.kind), &mut rng)
        })
        .collect()
}

/// `per_family` scenarios from each of the five families, each family on its own seed stream.
pub fn generate_benchmark(
    spec: &GenerationSpec,
    per_family: usize,
    noise_level: f64,
    seed: u64,
) -> Result<Vec<Scenario>> {
    let mut out = Vec::with_capacity(per_family * FamilyKind::ALL.len());
    for (i, kind) in FamilyKind::ALL.into_iter().enumerate() {
        let family = ScenarioFamily::new(kind).with_noise(noise_level);
        out.extend(generate_scenarios(
            &family,
            spec,
            per_family,
            derive_seed(seed, 1000 + i as u64),
        )?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct DatasetOut<'a> {
    schema_version: u32,
    scenarios: &'a [Scenario],
}

pub fn dataset_to_string(scenarios: &[Scenario]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&DatasetOut {
        schema_version: DATASET_SCHEMA_VERSION,
        scenarios,
    })?)
}

pub fn save_dataset(scenarios: &[Scenario], path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_string(scenarios)?)?;
    Ok(())
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<Scenario>> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let doc: serde_json::Value =
        serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let version = doc
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| parse_err("missing schema_version".into()))?;
    if version != u64::from(DATASET_SCHEMA_VERSION) {
        return Err(parse_err(format!("unsupported schema_version {version}")));
    }
    let records = doc
        .get("scenarios")
        .and_then(|v| v.as_array())
        .ok_or_else(|| parse_err("missing scenarios array".into()))?;
    records
        .iter()
        .enumerate()
        .map(|(index, rec)| {
            let s: Scenario = Scenario::deserialize(rec).map_err(|e| Error::Record {
                index,
                message: e.to_string(),
            })?;
            s.validate().map_err(|e| Error::Record {
                index,
                message: e.to_string(),
            })?;
            Ok(s)
        })
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<Scenario>> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, path)
}

/// Shuffled, disjoint `(train, val, test)` partition. Ratios must be non-negative and sum to 1.
pub fn split(
    scenarios: &[Scenario],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<Scenario>, Vec<Scenario>, Vec<Scenario>)> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..scenarios.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = scenarios.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| scenarios[i].clone()).collect();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}
