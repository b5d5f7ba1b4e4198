//! Synthetic adaptive-signal road network.
//!
//! Intersections sit on a regular grid; each carries up to four approach
//! lanes with a sensor. Every lane runs its own adaptive controller whose
//! cycle length follows an exponentially weighted average of recent flow
//! rate, and receives spillover from the facing lane of the upstream
//! intersection. Missing observations are injected afterwards as flags on
//! the complete ground truth.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{self, Cycle, DataFiles, Dataset, Measurement, SensorNode, SensorSeries};
use crate::error::{Error, Result};

const KM_PER_DEG: f64 = 111.194_926_644_558_73;
const SECONDS_PER_DAY: i64 = 86_400;

fn default_profile() -> Vec<(f64, f64)> {
    vec![
        (0.0, 0.03),
        (5.0, 0.04),
        (8.0, 0.30),
        (10.0, 0.18),
        (16.0, 0.20),
        (18.0, 0.32),
        (21.0, 0.10),
        (24.0, 0.03),
    ]
}

/// Every knob of the simulated scenario. Serializes as a JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub lanes_per_intersection: usize,
    /// Distance between neighbouring intersections.
    pub spacing_km: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub p_min: i64,
    pub p_max: i64,
    pub base_cycle: i64,
    /// Seconds of cycle length added per vehicle/second of smoothed flow rate.
    pub controller_gain: f64,
    /// `(hour, vehicles per second)` knots, linearly interpolated and wrapped at 24 h.
    pub diurnal_profile: Vec<(f64, f64)>,
    /// Fraction of the upstream lane's flow density that spills over.
    pub coupling: f64,
    pub missing_ratio: f64,
    /// Mean duration of one sensor outage.
    pub mean_missing_span: f64,
    /// Standard deviation of additive cycle-length noise, seconds.
    pub length_noise: f64,
    /// Standard deviation of multiplicative flow noise.
    pub flow_noise: f64,
    /// Lane demand multipliers are drawn uniformly from this range.
    pub lane_factor_range: (f64, f64),
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            grid_rows: 2,
            grid_cols: 3,
            lanes_per_intersection: 4,
            spacing_km: 0.6,
            origin_lat: 27.83,
            origin_lon: 113.15,
            p_min: 40,
            p_max: 200,
            base_cycle: 50,
            controller_gain: 350.0,
            diurnal_profile: default_profile(),
            coupling: 0.3,
            missing_ratio: 0.3,
            mean_missing_span: 900.0,
            length_noise: 5.0,
            flow_noise: 0.1,
            lane_factor_range: (0.7, 1.3),
            seed: 7,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_rows == 0 || self.grid_cols == 0 || self.lanes_per_intersection == 0 {
            return bad("grid and lane counts must be at least 1".into());
        }
        if !(1 <= self.p_min && self.p_min <= self.base_cycle && self.base_cycle <= self.p_max) {
            return bad(format!(
                "cycle bounds must satisfy 1 <= p_min <= base_cycle <= p_max, got {} / {} / {}",
                self.p_min, self.base_cycle, self.p_max
            ));
        }
        if !(0.0..1.0).contains(&self.missing_ratio) {
            return bad(format!("missing_ratio must be in [0, 1), got {}", self.missing_ratio));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad(format!("coupling must be in [0, 1], got {}", self.coupling));
        }
        if self.diurnal_profile.is_empty() || self.diurnal_profile.iter().any(|&(h, r)| !(0.0..=24.0).contains(&h) || r < 0.0 || !r.is_finite()) {
            return bad("diurnal profile needs knots with hour in [0, 24] and non-negative rates".into());
        }
        if self.diurnal_profile.windows(2).any(|w| w[1].0 < w[0].0) {
            return bad("diurnal profile hours must be sorted".into());
        }
        if self.length_noise < 0.0 || self.flow_noise < 0.0 || self.mean_missing_span <= 0.0 {
            return bad("noise levels must be >= 0 and mean_missing_span > 0".into());
        }
        let (lo, hi) = self.lane_factor_range;
        if !(0.0 < lo && lo <= hi) {
            return bad("lane_factor_range must satisfy 0 < lo <= hi".into());
        }
        if !(self.spacing_km > 0.0) || !(self.controller_gain.is_finite()) {
            return bad("spacing must be positive and gain finite".into());
        }
        Ok(())
    }

    pub fn sensor_count(&self) -> usize {
        self.grid_rows * self.grid_cols * self.lanes_per_intersection
    }

    /// Vehicles per second at second `t` of the day cycle.
    pub fn rate_at(&self, t: i64) -> f64 {
        let hour = (t.rem_euclid(SECONDS_PER_DAY)) as f64 / 3600.0;
        let knots = &self.diurnal_profile;
        if knots.len() == 1 {
            return knots[0].1;
        }
        // wrap: treat the profile as periodic over 24 h
        let first = knots[0];
        let last = knots[knots.len() - 1];
        if hour < first.0 {
            let span = first.0 + 24.0 - last.0;
            let w = if span > 0.0 { (hour + 24.0 - last.0) / span } else { 0.0 };
            return last.1 + w * (first.1 - last.1);
        }
        for w in knots.windows(2) {
            let (h0, r0) = w[0];
            let (h1, r1) = w[1];
            if hour >= h0 && hour <= h1 {
                if h1 == h0 {
                    return r1;
                }
                return r0 + (hour - h0) / (h1 - h0) * (r1 - r0);
            }
        }
        let span = first.0 + 24.0 - last.0;
        let w = if span > 0.0 { (hour - last.0) / span } else { 0.0 };
        last.1 + w * (first.1 - last.1)
    }
}

/// Identifies a lane sensor by grid position and approach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LaneKey {
    row: usize,
    col: usize,
    lane: usize,
}

impl LaneKey {
    fn id(&self) -> String {
        format!("I{}_{}_L{}", self.row, self.col, self.lane)
    }

    /// 0 = from north, 1 = from east, 2 = from south, 3 = from west.
    fn approach(&self) -> usize {
        self.lane % 4
    }

    fn stream(&self) -> u64 {
        ((self.row as u64) << 40) | ((self.col as u64) << 20) | self.lane as u64
    }
}

/// Complete ground truth plus the inputs needed to build the diffusion graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub dataset: Dataset,
    pub nodes: Vec<SensorNode>,
    pub reachability: BTreeSet<(String, String)>,
    /// Noise-free demand rate (vehicles/second) each lane saw at each cycle start.
    pub demand: Vec<Vec<f64>>,
}

struct LaneState {
    key: LaneKey,
    rng: ChaCha8Rng,
    factor: f64,
    ewma: f64,
    next_begin: i64,
    upstream: Option<usize>,
    cycles: Vec<Measurement>,
    demand: Vec<f64>,
}

/// Smoothing weight for a three-cycle half-life.
fn ewma_weight() -> f64 {
    1.0 - 0.5f64.powf(1.0 / 3.0)
}

/// Runs the scenario for `days` days and returns every ground-truth cycle
/// (all flagged observed).
pub fn simulate(config: &ScenarioConfig, days: u32) -> Result<Simulation> {
    config.validate()?;
    if days < 1 {
        return Err(Error::Config("days must be at least 1".into()));
    }
    let total = days as i64 * SECONDS_PER_DAY;
    let keys: Vec<LaneKey> = (0..config.grid_rows)
        .flat_map(|row| {
            (0..config.grid_cols).flat_map(move |col| {
                (0..config.lanes_per_intersection).map(move |lane| LaneKey { row, col, lane })
            })
        })
        .collect();
    let index_of = |row: isize, col: isize, lane: usize| -> Option<usize> {
        if row < 0 || col < 0 || row as usize >= config.grid_rows || col as usize >= config.grid_cols {
            return None;
        }
        keys.iter()
            .position(|k| k.row == row as usize && k.col == col as usize && k.lane == lane)
    };

    let len_noise = Normal::new(0.0, config.length_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let flow_noise = Normal::new(0.0, config.flow_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut lanes: Vec<LaneState> = keys
        .iter()
        .map(|&key| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(key.stream());
            let (lo, hi) = config.lane_factor_range;
            let factor = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let next_begin = rng.gen_range(0..config.base_cycle.max(1));
            let (dr, dc): (isize, isize) = match key.approach() {
                0 => (-1, 0),
                1 => (0, 1),
                2 => (1, 0),
                _ => (0, -1),
            };
            let upstream = index_of(key.row as isize + dr, key.col as isize + dc, key.lane);
            LaneState {
                key,
                rng,
                factor,
                ewma: config.rate_at(0) * factor,
                next_begin,
                upstream,
                cycles: Vec::new(),
                demand: Vec::new(),
            }
        })
        .collect();

    let alpha = ewma_weight();
    let mut queue: BinaryHeap<Reverse<(i64, usize)>> =
        lanes.iter().enumerate().map(|(i, l)| Reverse((l.next_begin, i))).collect();

    while let Some(Reverse((begin, i))) = queue.pop() {
        let spill_density = match lanes[i].upstream {
            Some(u) => lanes[u]
                .cycles
                .iter()
                .rev()
                .find(|m| m.end() < begin)
                .map(|m| m.flow / m.length as f64)
                .unwrap_or(0.0),
            None => 0.0,
        };
        let lane = &mut lanes[i];
        let noise = if config.length_noise > 0.0 {
            len_noise.sample(&mut lane.rng)
        } else {
            0.0
        };
        let raw = config.base_cycle as f64 + config.controller_gain * lane.ewma + noise;
        let length = (raw.round() as i64).clamp(config.p_min, config.p_max);
        if begin + length - 1 >= total {
            continue;
        }
        let mid = begin + length / 2;
        let demand = config.rate_at(mid) * lane.factor;
        let mean_flow = demand * length as f64 + config.coupling * spill_density * length as f64;
        let mult = if config.flow_noise > 0.0 {
            1.0 + flow_noise.sample(&mut lane.rng)
        } else {
            1.0
        };
        let flow = (mean_flow * mult).max(0.0);
        lane.ewma = alpha * (flow / length as f64) + (1.0 - alpha) * lane.ewma;
        lane.cycles.push(Measurement::new(begin, length, flow));
        lane.demand.push(demand);
        lane.next_begin = begin + length;
        queue.push(Reverse((lane.next_begin, i)));
    }

    let nodes = lanes.iter().map(|l| lane_node(config, l.key)).collect();
    let mut reachability = BTreeSet::new();
    for l in &lanes {
        if let Some(u) = l.upstream {
            reachability.insert((lanes[u].key.id(), l.key.id()));
        }
    }
    let demand = lanes.iter().map(|l| l.demand.clone()).collect();
    let dataset = Dataset::new(
        lanes
            .into_iter()
            .map(|l| SensorSeries::from_measurements(l.key.id(), &l.cycles))
            .collect(),
    );
    Ok(Simulation {
        dataset,
        nodes,
        reachability,
        demand,
    })
}

fn lane_node(config: &ScenarioConfig, key: LaneKey) -> SensorNode {
    let lat0 = config.origin_lat - key.row as f64 * config.spacing_km / KM_PER_DEG;
    let lon_scale = KM_PER_DEG * config.origin_lat.to_radians().cos();
    let lon0 = config.origin_lon + key.col as f64 * config.spacing_km / lon_scale;
    // sensors sit 30 m up their approach, 5 m apart per extra lane
    let off = 0.03 + 0.005 * (key.lane / 4) as f64;
    let (dn, de) = match key.approach() {
        0 => (off, 0.0),
        1 => (0.0, off),
        2 => (-off, 0.0),
        _ => (0.0, -off),
    };
    SensorNode {
        id: key.id(),
        lat: lat0 + dn / KM_PER_DEG,
        lon: lon0 + de / lon_scale,
    }
}

/// Fraction of covered time (cycle seconds) flagged unobserved.
pub fn missing_fraction(series: &SensorSeries) -> f64 {
    let total: i64 = series.cycles.iter().map(|c| c.measurement.length).sum();
    if total == 0 {
        return 0.0;
    }
    let missing: i64 = series
        .cycles
        .iter()
        .filter(|c| !c.observed)
        .map(|c| c.measurement.length)
        .sum();
    missing as f64 / total as f64
}

const MISSING_TOLERANCE: f64 = 0.05;
const MISSING_ATTEMPTS: usize = 100;

/// Flags contiguous runs of cycles as unobserved.
///
/// Outages arrive as a Poisson process in time with exponentially
/// distributed durations of mean `mean_span`; a cycle is lost when its
/// midpoint falls inside an outage. Draws are repeated with progressively
/// shorter spans until the realized fraction lands within five percentage
/// points of `ratio`, for at most 100 attempts.
pub fn inject_missing(series: &SensorSeries, ratio: f64, mean_span: f64, seed: u64) -> SensorSeries {
    let mut out = series.clone();
    out.cycles.iter_mut().for_each(|c| c.observed = true);
    if ratio <= 0.0 || out.cycles.is_empty() {
        return out;
    }
    let ratio = ratio.min(0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = out.cycles[0].measurement.begin;
    let end = out.cycles.last().map(|c| c.measurement.end()).unwrap_or(start);
    let mut best: Option<(f64, Vec<bool>)> = None;
    let mut span = mean_span.max(1.0);
    for attempt in 0..MISSING_ATTEMPTS {
        if attempt > 0 {
            span = (span * 0.8).max(1.0);
        }
        let mean_gap = span * (1.0 - ratio) / ratio;
        let outage = Exp::new(1.0 / span).expect("positive rate");
        let gap = Exp::new(1.0 / mean_gap.max(1e-9)).expect("positive rate");
        // stationary start: in an outage with probability `ratio`
        let mut down = rng.gen_bool(ratio);
        let mut t = start as f64;
        let mut switch = t + if down { outage.sample(&mut rng) } else { gap.sample(&mut rng) };
        let mut flags = Vec::with_capacity(out.cycles.len());
        for c in &out.cycles {
            let mid = c.measurement.begin as f64 + (c.measurement.length as f64 - 1.0) / 2.0;
            while mid >= switch {
                down = !down;
                t = switch;
                switch = t + if down { outage.sample(&mut rng) } else { gap.sample(&mut rng) };
            }
            flags.push(!down);
        }
        let total = (end - start + 1) as f64;
        let missing: i64 = out
            .cycles
            .iter()
            .zip(&flags)
            .filter(|(_, &obs)| !obs)
            .map(|(c, _)| c.measurement.length)
            .sum();
        let realized = missing as f64 / total;
        let err = (realized - ratio).abs();
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, flags));
        }
        if err <= MISSING_TOLERANCE {
            break;
        }
    }
    let (err, flags) = best.expect("at least one attempt");
    if err > MISSING_TOLERANCE {
        log::warn!(
            "sensor `{}`: missing fraction off target by {:.3} after {} attempts",
            series.sensor_id,
            err,
            MISSING_ATTEMPTS
        );
    }
    for (c, obs) in out.cycles.iter_mut().zip(flags) {
        c.observed = obs;
    }
    out
}

/// Simulated dataset with missing flags, ready for export.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dataset: Dataset,
    pub nodes: Vec<SensorNode>,
    pub reachability: BTreeSet<(String, String)>,
}

pub fn generate(config: &ScenarioConfig, days: u32) -> Result<Generated> {
    let sim = simulate(config, days)?;
    let series = sim
        .dataset
        .series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
            inject_missing(s, config.missing_ratio, config.mean_missing_span, seed)
        })
        .collect();
    Ok(Generated {
        dataset: Dataset::new(series),
        nodes: sim.nodes,
        reachability: sim.reachability,
    })
}

/// Writes `dataset.csv`, `nodes.csv` and `reach.csv` into `out_dir`.
pub fn export(generated: &Generated, out_dir: &Path) -> Result<()> {
    data::ensure_dir(out_dir)?;
    generated.dataset.write_csv(&out_dir.join(DataFiles::DATASET))?;
    data::write_nodes_csv(&out_dir.join(DataFiles::NODES), &generated.nodes)?;
    data::write_reach_csv(&out_dir.join(DataFiles::REACH), &generated.reachability)?;
    Ok(())
}

/// Flags every cycle of `dataset` observed; useful for noise-free fixtures.
pub fn all_observed(dataset: &Dataset) -> Dataset {
    let mut d = dataset.clone();
    for s in &mut d.series {
        for c in &mut s.cycles {
            *c = Cycle {
                measurement: c.measurement,
                observed: true,
            };
        }
    }
    d
}
