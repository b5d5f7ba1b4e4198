//! Cycle-level traffic measurements, diffusion graphs and forecast windows.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One traffic-signal cycle observation. Timestamps are integer seconds
/// relative to the dataset start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub begin: i64,
    pub length: i64,
    pub flow: f64,
}

impl Measurement {
    pub fn new(begin: i64, length: i64, flow: f64) -> Self {
        Self {
            begin,
            length,
            flow,
        }
    }

    /// Last second covered by the cycle.
    pub fn end(&self) -> i64 {
        self.begin + self.length - 1
    }
}

/// A ground-truth cycle and whether the sensor actually reported it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cycle {
    pub measurement: Measurement,
    pub observed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorSeries {
    pub sensor_id: String,
    pub cycles: Vec<Cycle>,
}

impl SensorSeries {
    pub fn new(sensor_id: impl Into<String>) -> Self {
        Self {
            sensor_id: sensor_id.into(),
            cycles: Vec::new(),
        }
    }

    pub fn from_measurements(sensor_id: impl Into<String>, ms: &[Measurement]) -> Self {
        Self {
            sensor_id: sensor_id.into(),
            cycles: ms
                .iter()
                .map(|&measurement| Cycle {
                    measurement,
                    observed: true,
                })
                .collect(),
        }
    }

    pub fn observed(&self) -> impl Iterator<Item = &Measurement> {
        self.cycles
            .iter()
            .filter(|c| c.observed)
            .map(|c| &c.measurement)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    LengthBelowOne { length: i64 },
    NegativeFlow { flow: f64 },
    NonFiniteFlow,
    NotIncreasing { begin: i64, prev_begin: i64 },
    Overlap { begin: i64, prev_end: i64 },
}

/// One broken invariant in a [`SensorSeries`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = self.index;
        match &self.kind {
            ViolationKind::LengthBelowOne { length } => {
                write!(f, "length < 1 at index {i} (length {length})")
            }
            ViolationKind::NegativeFlow { flow } => write!(f, "flow < 0 at index {i} (flow {flow})"),
            ViolationKind::NonFiniteFlow => write!(f, "non-finite flow at index {i}"),
            ViolationKind::NotIncreasing { begin, prev_begin } => write!(
                f,
                "begin not increasing at index {i}: begin {begin} <= prev begin {prev_begin}"
            ),
            ViolationKind::Overlap { begin, prev_end } => {
                write!(f, "overlap at index {i}: begin {begin} <= prev end {prev_end}")
            }
        }
    }
}

/// Reports every broken cycle invariant; an empty result means the series is valid.
pub fn validate_series(series: &SensorSeries) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut prev: Option<&Measurement> = None;
    for (index, c) in series.cycles.iter().enumerate() {
        let m = &c.measurement;
        if m.length < 1 {
            out.push(Violation {
                index,
                kind: ViolationKind::LengthBelowOne { length: m.length },
            });
        }
        if !m.flow.is_finite() {
            out.push(Violation {
                index,
                kind: ViolationKind::NonFiniteFlow,
            });
        } else if m.flow < 0.0 {
            out.push(Violation {
                index,
                kind: ViolationKind::NegativeFlow { flow: m.flow },
            });
        }
        if let Some(p) = prev {
            if m.begin <= p.begin {
                out.push(Violation {
                    index,
                    kind: ViolationKind::NotIncreasing {
                        begin: m.begin,
                        prev_begin: p.begin,
                    },
                });
            } else if m.begin <= p.end() {
                out.push(Violation {
                    index,
                    kind: ViolationKind::Overlap {
                        begin: m.begin,
                        prev_end: p.end(),
                    },
                });
            }
        }
        prev = Some(m);
    }
    out
}

/// Complete ground-truth cycle sequences for a set of sensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub series: Vec<SensorSeries>,
}

impl Dataset {
    pub fn new(series: Vec<SensorSeries>) -> Self {
        Self { series }
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// First begin and last end over all cycles, if any.
    pub fn time_range(&self) -> Option<(i64, i64)> {
        let mut range: Option<(i64, i64)> = None;
        for c in self.series.iter().flat_map(|s| s.cycles.iter()) {
            let (b, e) = (c.measurement.begin, c.measurement.end());
            range = Some(match range {
                None => (b, e),
                Some((lo, hi)) => (lo.min(b), hi.max(e)),
            });
        }
        range
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.series.iter().position(|s| s.sensor_id == id)
    }

    /// Reorders series to follow the graph's node order. Graph nodes with no
    /// series get an empty one; series without a node are an error.
    pub fn aligned_to(&self, graph: &DiffusionGraph) -> Result<Dataset> {
        let mut by_id: HashMap<&str, &SensorSeries> = HashMap::new();
        for s in &self.series {
            by_id.insert(s.sensor_id.as_str(), s);
        }
        for s in &self.series {
            if graph.index_of(&s.sensor_id).is_none() {
                return Err(Error::UnknownSensor(s.sensor_id.clone()));
            }
        }
        Ok(Dataset {
            series: graph
                .nodes
                .iter()
                .map(|n| {
                    by_id
                        .get(n.id.as_str())
                        .map(|s| (*s).clone())
                        .unwrap_or_else(|| SensorSeries::new(n.id.clone()))
                })
                .collect(),
        })
    }

    /// Writes the dataset CSV (`sensor_id,begin,length,flow,observed`),
    /// sorted by sensor id then begin.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut order: Vec<&SensorSeries> = self.series.iter().collect();
        order.sort_by(|a, b| a.sensor_id.cmp(&b.sensor_id));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sensor_id", "begin", "length", "flow", "observed"])?;
        for s in order {
            let mut cycles = s.cycles.clone();
            cycles.sort_by_key(|c| c.measurement.begin);
            for c in cycles {
                let m = c.measurement;
                w.write_record([
                    s.sensor_id.clone(),
                    m.begin.to_string(),
                    m.length.to_string(),
                    format!("{}", m.flow),
                    if c.observed { "1" } else { "0" }.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let mut series: BTreeMap<String, SensorSeries> = BTreeMap::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Data(format!("{}: row {}: bad {what}", path.display(), line + 2));
            if rec.len() != 5 {
                return Err(bad("column count"));
            }
            let id = rec[0].to_string();
            let begin: i64 = rec[1].trim().parse().map_err(|_| bad("begin"))?;
            let length: i64 = rec[2].trim().parse().map_err(|_| bad("length"))?;
            let flow: f64 = rec[3].trim().parse().map_err(|_| bad("flow"))?;
            let observed = match rec[4].trim() {
                "1" => true,
                "0" => false,
                _ => return Err(bad("observed flag")),
            };
            series
                .entry(id.clone())
                .or_insert_with(|| SensorSeries::new(id))
                .cycles
                .push(Cycle {
                    measurement: Measurement::new(begin, length, flow),
                    observed,
                });
        }
        Ok(Dataset {
            series: series.into_values().collect(),
        })
    }
}

/// Features attached to a directed edge of the diffusion graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeFeature {
    pub distance_km: f64,
    pub reachable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorNode {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub feature: EdgeFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionGraph {
    pub nodes: Vec<SensorNode>,
    pub edges: Vec<Edge>,
    pub epsilon_km: f64,
    /// Edge indices grouped by source node.
    out_edges: Vec<Vec<usize>>,
}

const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Great-circle distance between two (lat, lon) points in degrees.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Connects every ordered pair of distinct sensors closer than `epsilon_km`.
pub fn build_graph(
    sensors: &[SensorNode],
    reachable: &BTreeSet<(String, String)>,
    epsilon_km: f64,
) -> Result<DiffusionGraph> {
    if !(epsilon_km > 0.0) || !epsilon_km.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon_km}")));
    }
    let mut seen = BTreeSet::new();
    for s in sensors {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::DuplicateSensor(s.id.clone()));
        }
        if !(-90.0..=90.0).contains(&s.lat) || !(-180.0..=180.0).contains(&s.lon) {
            return Err(Error::Data(format!("sensor `{}` has invalid coordinates", s.id)));
        }
    }
    let mut edges = Vec::new();
    for (j, src) in sensors.iter().enumerate() {
        for (i, dst) in sensors.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = haversine_km(src.lat, src.lon, dst.lat, dst.lon);
            if d < epsilon_km {
                edges.push(Edge {
                    src: j,
                    dst: i,
                    feature: EdgeFeature {
                        distance_km: d,
                        reachable: reachable.contains(&(src.id.clone(), dst.id.clone())),
                    },
                });
            }
        }
    }
    Ok(DiffusionGraph::from_parts(sensors.to_vec(), edges, epsilon_km))
}

impl DiffusionGraph {
    pub fn from_parts(nodes: Vec<SensorNode>, edges: Vec<Edge>, epsilon_km: f64) -> Self {
        let mut out_edges = vec![Vec::new(); nodes.len()];
        for (k, e) in edges.iter().enumerate() {
            out_edges[e.src].push(k);
        }
        Self {
            nodes,
            edges,
            epsilon_km,
            out_edges,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Edges leaving `src`.
    pub fn out_edges(&self, src: usize) -> impl Iterator<Item = &Edge> {
        self.out_edges[src].iter().map(|&k| &self.edges[k])
    }

    pub fn edge(&self, src: usize, dst: usize) -> Option<&Edge> {
        self.out_edges(src).find(|e| e.dst == dst)
    }
}

pub fn write_nodes_csv(path: &Path, nodes: &[SensorNode]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sensor_id", "lat", "lon"])?;
    for n in nodes {
        w.write_record([n.id.clone(), format!("{}", n.lat), format!("{}", n.lon)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_reach_csv(path: &Path, reach: &BTreeSet<(String, String)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["src", "dst"])?;
    for (a, b) in reach {
        w.write_record([a, b])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_nodes_csv(path: &Path) -> Result<Vec<SensorNode>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Data(format!("{}: row {}: malformed node", path.display(), line + 2));
        if rec.len() != 3 {
            return Err(bad());
        }
        out.push(SensorNode {
            id: rec[0].to_string(),
            lat: rec[1].trim().parse().map_err(|_| bad())?,
            lon: rec[2].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn read_reach_csv(path: &Path) -> Result<BTreeSet<(String, String)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = BTreeSet::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Data(format!("{}: malformed reachability row", path.display())));
        }
        out.insert((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

/// Dataset directory layout shared by the generator, the trainer and the FFI.
pub struct DataFiles;

impl DataFiles {
    pub const DATASET: &'static str = "dataset.csv";
    pub const NODES: &'static str = "nodes.csv";
    pub const REACH: &'static str = "reach.csv";
}

/// Loads `dataset.csv`, `nodes.csv` and `reach.csv` from `dir`, builds the
/// graph and aligns the series to its node order.
pub fn load_dir(dir: &Path, epsilon_km: f64) -> Result<(Dataset, DiffusionGraph)> {
    let ds_path = dir.join(DataFiles::DATASET);
    if !ds_path.exists() {
        return Err(Error::Data(format!("missing dataset file {}", ds_path.display())));
    }
    let dataset = Dataset::read_csv(&ds_path)?;
    let nodes = read_nodes_csv(&dir.join(DataFiles::NODES))?;
    let reach = read_reach_csv(&dir.join(DataFiles::REACH))?;
    let graph = build_graph(&nodes, &reach, epsilon_km)?;
    for s in &dataset.series {
        if let Some(v) = validate_series(s).first() {
            return Err(Error::Data(format!("sensor `{}`: {v}", s.sensor_id)));
        }
    }
    let dataset = dataset.aligned_to(&graph)?;
    Ok((dataset, graph))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Historical and predicted window lengths plus anchor spacing, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowParams {
    pub history: i64,
    pub horizon: i64,
    pub stride: i64,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self {
            history: 3600,
            horizon: 3600,
            stride: 1800,
        }
    }
}

/// One ground-truth cycle to be predicted, aligned by ordinal position
/// after the sensor's last observed measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSlot {
    pub truth: Measurement,
    /// 1 when the slot counts in losses and metrics.
    pub mask: bool,
    /// `begin - end_of_last_observed`.
    pub elapsed: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorWindow {
    pub sensor: usize,
    /// Observed measurements ending inside the historical window.
    pub history: Vec<Measurement>,
    /// Empty when the sensor is unavailable.
    pub targets: Vec<TargetSlot>,
}

impl SensorWindow {
    pub fn is_available(&self) -> bool {
        !self.history.is_empty()
    }

    pub fn last_end(&self) -> Option<i64> {
        self.history.last().map(Measurement::end)
    }

    pub fn masked_count(&self) -> usize {
        self.targets.iter().filter(|t| t.mask).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastInstance {
    pub anchor: i64,
    pub history_len: i64,
    pub horizon: i64,
    pub sensors: Vec<SensorWindow>,
}

impl ForecastInstance {
    pub fn available(&self) -> impl Iterator<Item = &SensorWindow> {
        self.sensors.iter().filter(|s| s.is_available())
    }
}

/// Builds the instance anchored at `anchor` (the last second of history).
///
/// Targets are the ground-truth cycles beginning after the last observed
/// measurement and no later than `anchor + horizon`; only those that begin
/// after the anchor and were observed are masked in.
pub fn window_at(dataset: &Dataset, anchor: i64, params: &WindowParams) -> ForecastInstance {
    let lo = anchor - params.history + 1;
    let hi = anchor + params.horizon;
    let sensors = dataset
        .series
        .iter()
        .enumerate()
        .map(|(sensor, s)| {
            let history: Vec<Measurement> = s
                .observed()
                .filter(|m| m.end() >= lo && m.end() <= anchor)
                .copied()
                .collect();
            let targets = match history.last() {
                None => Vec::new(),
                Some(last) => {
                    let t_last = last.end();
                    s.cycles
                        .iter()
                        .filter(|c| c.measurement.begin > t_last && c.measurement.begin <= hi)
                        .map(|c| TargetSlot {
                            truth: c.measurement,
                            mask: c.observed && c.measurement.begin > anchor,
                            elapsed: c.measurement.begin - t_last,
                        })
                        .collect()
                }
            };
            SensorWindow {
                sensor,
                history,
                targets,
            }
        })
        .collect();
    ForecastInstance {
        anchor,
        history_len: params.history,
        horizon: params.horizon,
        sensors,
    }
}

/// All anchors on the stride grid whose history fits after the dataset
/// start and whose predicted window ends strictly before the last recorded
/// second.
pub fn anchors(dataset: &Dataset, params: &WindowParams) -> Vec<i64> {
    let Some((start, end)) = dataset.time_range() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut a = start + params.history - 1;
    while a + params.horizon < end {
        out.push(a);
        a += params.stride;
    }
    out
}

pub fn make_windows(dataset: &Dataset, params: &WindowParams) -> Result<Vec<ForecastInstance>> {
    if params.history <= 0 || params.horizon <= 0 || params.stride <= 0 {
        return Err(Error::Config("window lengths and stride must be positive".into()));
    }
    let anchors = anchors(dataset, params);
    if anchors.is_empty() {
        log::warn!(
            "dataset shorter than history + horizon ({} s); no windows produced",
            params.history + params.horizon
        );
    }
    Ok(anchors.into_iter().map(|a| window_at(dataset, a, params)).collect())
}

/// Chronological train / validation / test partition.
#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<ForecastInstance>,
    pub val: Vec<ForecastInstance>,
    pub test: Vec<ForecastInstance>,
    /// Exclusive end of the training time range.
    pub train_end: i64,
}

/// Splits windows 60/20/20 by time; windows whose predicted range straddles
/// a boundary are dropped.
pub fn split_windows(dataset: &Dataset, params: &WindowParams) -> Result<Splits> {
    let all = make_windows(dataset, params)?;
    let Some((start, end)) = dataset.time_range() else {
        return Ok(Splits::default());
    };
    let span = (end - start + 1) as f64;
    let b1 = start + (0.6 * span).round() as i64;
    let b2 = start + (0.8 * span).round() as i64;
    let mut splits = Splits {
        train_end: b1,
        ..Default::default()
    };
    for w in all {
        let target_end = w.anchor + w.horizon;
        if target_end < b1 {
            splits.train.push(w);
        } else if w.anchor >= b1 && target_end < b2 {
            splits.val.push(w);
        } else if w.anchor >= b2 {
            splits.test.push(w);
        }
    }
    Ok(splits)
}

/// z-score statistics for cycle length, flow and unit-time flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub p_mean: f64,
    pub p_std: f64,
    pub f_mean: f64,
    pub f_std: f64,
    pub u_mean: f64,
    pub u_std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            p_mean: 0.0,
            p_std: 1.0,
            f_mean: 0.0,
            f_std: 1.0,
            u_mean: 0.0,
            u_std: 1.0,
        }
    }
}

impl NormStats {
    /// Statistics over observed cycles that end before `until`.
    pub fn fit(dataset: &Dataset, until: i64) -> NormStats {
        let ms: Vec<&Measurement> = dataset
            .series
            .iter()
            .flat_map(|s| s.observed())
            .filter(|m| m.end() < until)
            .collect();
        if ms.is_empty() {
            return NormStats::default();
        }
        let stats = |xs: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = xs.collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt().max(1e-6))
        };
        let (p_mean, p_std) = stats(&mut ms.iter().map(|m| m.length as f64));
        let (f_mean, f_std) = stats(&mut ms.iter().map(|m| m.flow));
        let (u_mean, u_std) = stats(&mut ms.iter().map(|m| m.flow / m.length as f64));
        NormStats {
            p_mean,
            p_std,
            f_mean,
            f_std,
            u_mean,
            u_std,
        }
    }

    pub fn z_length(&self, p: f64) -> f64 {
        (p - self.p_mean) / self.p_std
    }

    pub fn z_flow(&self, f: f64) -> f64 {
        (f - self.f_mean) / self.f_std
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<NormStats> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(spans: &[(i64, i64)]) -> SensorSeries {
        let ms: Vec<Measurement> = spans.iter().map(|&(b, p)| Measurement::new(b, p, 1.0)).collect();
        SensorSeries::from_measurements("s", &ms)
    }

    #[test]
    fn end_follows_begin_and_length() {
        assert_eq!(Measurement::new(0, 60, 1.0).end(), 59);
    }

    #[test]
    fn overlapping_cycles_are_reported() {
        let v = validate_series(&series(&[(0, 60), (59, 50)]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "overlap at index 1: begin 59 <= prev end 59");
    }

    #[test]
    fn adjacent_cycles_are_valid() {
        assert!(validate_series(&series(&[(0, 60), (60, 50)])).is_empty());
    }

    #[test]
    fn zero_length_is_reported() {
        let v = validate_series(&series(&[(0, 0)]));
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().starts_with("length < 1 at index 0"));
    }

    #[test]
    fn negative_flow_and_order_are_reported() {
        let mut s = series(&[(100, 10), (50, 10)]);
        s.cycles[0].measurement.flow = -1.0;
        let v = validate_series(&s);
        assert_eq!(v.len(), 2);
        assert!(matches!(v[0].kind, ViolationKind::NegativeFlow { .. }));
        assert!(matches!(v[1].kind, ViolationKind::NotIncreasing { .. }));
    }

    fn node(id: &str, lat: f64, lon: f64) -> SensorNode {
        SensorNode {
            id: id.into(),
            lat,
            lon,
        }
    }

    // One degree of latitude is ~111.2 km.
    const KM_PER_DEG: f64 = 2.0 * std::f64::consts::PI * EARTH_RADIUS_KM / 360.0;

    #[test]
    fn close_sensors_get_bidirectional_edges() {
        let nodes = [node("a", 30.0, 110.0), node("b", 30.0 + 0.5 / KM_PER_DEG, 110.0)];
        let mut reach = BTreeSet::new();
        reach.insert(("a".to_string(), "b".to_string()));
        let g = build_graph(&nodes, &reach, 1.0).unwrap();
        assert_eq!(g.edges.len(), 2);
        let ab = g.edge(0, 1).unwrap();
        assert!((ab.feature.distance_km - 0.5).abs() < 1e-9);
        assert!(ab.feature.reachable);
        assert!(!g.edge(1, 0).unwrap().feature.reachable);
    }

    #[test]
    fn distant_sensors_are_not_connected() {
        let nodes = [node("a", 30.0, 110.0), node("b", 30.0 + 1.5 / KM_PER_DEG, 110.0)];
        let g = build_graph(&nodes, &BTreeSet::new(), 1.0).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn single_sensor_has_no_self_loop() {
        let g = build_graph(&[node("a", 30.0, 110.0)], &BTreeSet::new(), 1.0).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let err = build_graph(&[node("a", 0.0, 0.0), node("a", 0.0, 0.0)], &BTreeSet::new(), 1.0)
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateSensor(id) if id == "a"));
    }

    fn regular(len: i64, total: i64) -> SensorSeries {
        let ms: Vec<Measurement> = (0..total / len).map(|k| Measurement::new(k * len, len, 5.0)).collect();
        SensorSeries::from_measurements("s", &ms)
    }

    #[test]
    fn three_hour_dataset_yields_two_anchors() {
        let ds = Dataset::new(vec![regular(60, 3 * 3600)]);
        let w = make_windows(&ds, &WindowParams::default()).unwrap();
        let a: Vec<i64> = w.iter().map(|w| w.anchor).collect();
        assert_eq!(a, vec![3599, 5399]);
    }

    #[test]
    fn short_dataset_yields_no_windows() {
        let ds = Dataset::new(vec![regular(60, 3600)]);
        assert!(make_windows(&ds, &WindowParams::default()).unwrap().is_empty());
    }

    #[test]
    fn sensor_without_history_is_unavailable() {
        let mut quiet = regular(60, 3 * 3600);
        quiet.sensor_id = "q".into();
        for c in quiet.cycles.iter_mut().filter(|c| c.measurement.end() < 3600) {
            c.observed = false;
        }
        let ds = Dataset::new(vec![regular(60, 3 * 3600), quiet]);
        let w = window_at(&ds, 3599, &WindowParams::default());
        assert!(w.sensors[0].is_available());
        assert!(!w.sensors[1].is_available());
        assert!(w.sensors[1].targets.is_empty());
    }

    #[test]
    fn missing_target_keeps_its_position() {
        let mut s = regular(60, 3 * 3600);
        // second cycle after the anchor goes missing
        let idx = s.cycles.iter().position(|c| c.measurement.begin == 3660).unwrap();
        s.cycles[idx].observed = false;
        let ds = Dataset::new(vec![s]);
        let w = window_at(&ds, 3599, &WindowParams::default());
        let t = &w.sensors[0].targets;
        assert_eq!(t.len(), 60);
        assert!(t[0].mask);
        assert!(!t[1].mask);
        assert_eq!(t[1].truth.begin, 3660);
        assert_eq!(t[1].elapsed, 61);
        assert!(t[2].mask);
    }

    #[test]
    fn elapsed_accumulates_consecutive_lengths() {
        let ms = [
            Measurement::new(0, 50, 1.0),
            Measurement::new(50, 70, 1.0),
            Measurement::new(120, 30, 1.0),
            Measurement::new(150, 90, 1.0),
            Measurement::new(240, 60, 1.0),
        ];
        let ds = Dataset::new(vec![SensorSeries::from_measurements("s", &ms)]);
        let p = WindowParams {
            history: 120,
            horizon: 200,
            stride: 10,
        };
        let w = window_at(&ds, 119, &p);
        let t = &w.sensors[0].targets;
        let mut acc = 1;
        for slot in t {
            assert_eq!(slot.elapsed, acc);
            acc += slot.truth.length;
        }
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut s = regular(37, 1000);
        s.cycles[3].observed = false;
        s.cycles[2].measurement.flow = 0.1 + 0.2;
        let ds = Dataset::new(vec![s]);
        ds.write_csv(&path).unwrap();
        assert_eq!(Dataset::read_csv(&path).unwrap(), ds);
    }
}
