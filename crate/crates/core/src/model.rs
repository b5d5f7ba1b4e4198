//! Forecasting models: the full graph-diffusion model and a plain
//! recurrent encoder-decoder, both decoding with [`Sapn`].

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agdn::{replay, AgdnLayer};
use crate::autograd::{ParamStore, Tape, Var};
use crate::data::{DiffusionGraph, ForecastInstance, NormStats};
use crate::error::{Error, Result};
use crate::nn::Gru;
use crate::sapn::{max_steps, PredictedSlot, Rollout, RolloutMode, Sapn};
use crate::time_encoding::TimeEncoding;
use crate::ttcn::{fuse, Ttcn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Aseer,
    Recurrent,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aseer" => Ok(ModelKind::Aseer),
            "recurrent" => Ok(ModelKind::Recurrent),
            other => Err(Error::Config(format!("unknown model '{other}' (expected aseer or recurrent)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Representation width `D`.
    pub d_model: usize,
    /// Time encoding dimension (even).
    pub d_phi: usize,
    /// Hidden width of the meta-filter trunk and the predictor.
    pub hidden: usize,
    /// Slots emitted per decoding step; the recurrent model always uses 1.
    pub xi: usize,
    /// Seconds per unit of the raw-interval entry of the time encoding.
    pub time_unit: f64,
    pub seed: u64,
    pub no_agdn: bool,
    pub no_pte: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Aseer,
            d_model: 64,
            d_phi: 16,
            hidden: 64,
            xi: 12,
            time_unit: 3600.0,
            seed: 0,
            no_agdn: false,
            no_pte: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.hidden == 0 {
            return Err(Error::Config("d_model and hidden must be positive".into()));
        }
        if self.d_phi == 0 || self.d_phi % 2 != 0 {
            return Err(Error::Config(format!("d_phi must be a positive even number, got {}", self.d_phi)));
        }
        if self.xi == 0 {
            return Err(Error::Config("xi must be >= 1".into()));
        }
        if self.time_unit.is_nan() || self.time_unit <= 0.0 {
            return Err(Error::Config("time_unit must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_xi(&self) -> usize {
        match self.kind {
            ModelKind::Aseer => self.xi,
            ModelKind::Recurrent => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Encoder {
    Aseer { agdn: AgdnLayer, ttcn: Ttcn },
    Recurrent { gru: Gru },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub sensor_ids: Vec<String>,
    pub norm: NormStats,
    pub store: ParamStore,
    pub te: TimeEncoding,
    pub encoder: Encoder,
    pub sapn: Sapn,
}

/// Per-sensor forecast in absolute time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorForecast {
    pub sensor: usize,
    /// End of the last observed measurement.
    pub t_last: i64,
    pub slots: Vec<PredictedSlot>,
    pub truncated: bool,
}

impl SensorForecast {
    pub fn begin(&self, k: usize) -> f64 {
        self.t_last as f64 + self.slots[k].elapsed
    }
}

/// Anything that turns a forecast instance into per-sensor forecasts.
pub trait Forecaster {
    fn name(&self) -> &str;

    /// Forecasts every available sensor. Each forecast covers the horizon
    /// and, when `needed` is set, at least as many slots as the sensor has
    /// target slots.
    fn forecast(&self, instance: &ForecastInstance, graph: &DiffusionGraph, needed: bool) -> Result<Vec<SensorForecast>>;
}

/// Encoder output for the available sensors of one instance.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub rows: Vec<usize>,
    pub seq: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub rows: Vec<usize>,
    pub rollout: Rollout,
}

impl Model {
    pub fn new(config: ModelConfig, sensor_ids: Vec<String>, norm: NormStats) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let n = sensor_ids.len();
        let mut te = TimeEncoding::new(&mut store, &mut rng, "te", n, config.d_phi)?;
        let scale = 1.0 / config.time_unit;
        let d = config.d_model;
        let encoder = match config.kind {
            ModelKind::Aseer => {
                let agdn = AgdnLayer::new(&mut store, &mut rng, "agdn", te.width(), d, scale);
                let ttcn = Ttcn::new(&mut store, &mut rng, "ttcn", 2 + d + te.width(), config.hidden, d);
                Encoder::Aseer { agdn, ttcn }
            }
            ModelKind::Recurrent => Encoder::Recurrent {
                gru: Gru::new(&mut store, &mut rng, "encoder", 3, d),
            },
        };
        let sapn = Sapn::new(
            &mut store,
            &mut rng,
            "sapn",
            te.width(),
            d,
            config.hidden,
            config.effective_xi(),
            scale,
        )?;
        if config.no_pte || config.kind == ModelKind::Recurrent {
            te.disable_personalized(&mut store);
        }
        Ok(Self {
            config,
            sensor_ids,
            norm,
            store,
            te,
            encoder,
            sapn,
        })
    }

    pub fn xi(&self) -> usize {
        self.sapn.xi
    }

    fn check_instance(&self, instance: &ForecastInstance, graph: &DiffusionGraph) -> Result<()> {
        if instance.sensors.len() != self.sensor_ids.len() || graph.len() != self.sensor_ids.len() {
            return Err(Error::Shape(format!(
                "model has {} sensors, instance {} and graph {}",
                self.sensor_ids.len(),
                instance.sensors.len(),
                graph.len()
            )));
        }
        Ok(())
    }

    /// Sequence representations for the available sensors, or `None` when
    /// no sensor observed anything in the historical window.
    pub fn encode(&self, tape: &mut Tape, instance: &ForecastInstance, graph: &DiffusionGraph) -> Result<Option<Encoded>> {
        self.check_instance(instance, graph)?;
        let rows: Vec<usize> = instance.available().map(|w| w.sensor).collect();
        if rows.is_empty() {
            return Ok(None);
        }
        let seq = match &self.encoder {
            Encoder::Aseer { agdn, ttcn } => self.encode_aseer(tape, agdn, ttcn, instance, graph)?,
            Encoder::Recurrent { gru } => self.encode_recurrent(tape, gru, instance, &rows),
        };
        Ok(Some(Encoded { rows, seq }))
    }

    fn encode_aseer(
        &self,
        tape: &mut Tape,
        agdn: &AgdnLayer,
        ttcn: &Ttcn,
        instance: &ForecastInstance,
        graph: &DiffusionGraph,
    ) -> Result<Var> {
        let schedule = replay(instance, graph, &self.norm)?;
        let m = schedule.measurement_count();
        let s = schedule.sensors.len();
        let d = self.config.d_model;
        let (spatial, tail) = if self.config.no_agdn {
            (tape.constant(Array2::zeros((m, d))), tape.constant(Array2::zeros((s, d))))
        } else {
            let out = agdn.forward(tape, &self.store, &self.te, &schedule);
            (out.per_measurement, out.tail)
        };

        let mut x = Array2::zeros((m, 2));
        let mut dt = Array2::zeros((m, 1));
        let mut rows = Vec::with_capacity(m);
        let mut offsets = vec![0];
        let mut r = 0;
        for (k, convs) in schedule.per_sensor.iter().enumerate() {
            let sensor = schedule.sensors[k];
            let t_last = convs.last().map(|c| c.query_time).unwrap_or_default();
            for c in convs {
                x[[r, 0]] = c.query[0];
                x[[r, 1]] = c.query[1];
                dt[[r, 0]] = (t_last - c.query_time) as f64;
                rows.push(sensor);
                r += 1;
            }
            offsets.push(r);
        }
        let x = tape.constant(x);
        let dt = tape.constant(dt);
        let phi = self.te.encode_scaled(tape, &self.store, dt, rows, self.sapn.time_scale);
        let z = tape.concat_cols(&[x, spatial, phi]);
        let h = ttcn.forward(tape, &self.store, z, &offsets)?;
        fuse(tape, h, tail)
    }

    /// GRU over z-scored `(length, flow, interval)` triples; shorter
    /// sequences are left-padded and hold their state through the padding.
    fn encode_recurrent(&self, tape: &mut Tape, gru: &Gru, instance: &ForecastInstance, rows: &[usize]) -> Var {
        let n = rows.len();
        let seqs: Vec<Vec<[f64; 3]>> = rows
            .iter()
            .map(|&s| {
                let h = &instance.sensors[s].history;
                h.iter()
                    .enumerate()
                    .map(|(k, m)| {
                        let gap = if k == 0 { m.length } else { m.end() - h[k - 1].end() };
                        [
                            self.norm.z_length(m.length as f64),
                            self.norm.z_flow(m.flow),
                            self.norm.z_length(gap as f64),
                        ]
                    })
                    .collect()
            })
            .collect();
        let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut h = tape.constant(Array2::zeros((n, gru.hidden)));
        for k in 0..steps {
            let mut x = Array2::zeros((n, 3));
            let mut active = Array2::zeros((n, 1));
            for (r, seq) in seqs.iter().enumerate() {
                let pad = steps - seq.len();
                if k >= pad {
                    let v = seq[k - pad];
                    x[[r, 0]] = v[0];
                    x[[r, 1]] = v[1];
                    x[[r, 2]] = v[2];
                    active[[r, 0]] = 1.0;
                }
            }
            let x = tape.constant(x);
            let next = gru.step(tape, &self.store, x, h);
            let delta = tape.sub(next, h);
            let active = tape.constant(active);
            let delta = tape.mul_col(delta, active);
            h = tape.add(h, delta);
        }
        h
    }

    /// Training-mode forward pass: enough fixed steps to cover every
    /// sensor's target slots.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        instance: &ForecastInstance,
        graph: &DiffusionGraph,
    ) -> Result<Option<ForwardOutput>> {
        let Some(enc) = self.encode(tape, instance, graph)? else {
            return Ok(None);
        };
        let longest = enc
            .rows
            .iter()
            .map(|&s| instance.sensors[s].targets.len())
            .max()
            .unwrap_or(0);
        let steps = longest.div_ceil(self.xi()).max(1);
        let rollout = self.sapn.rollout(
            tape,
            &self.store,
            &self.te,
            enc.seq,
            &enc.rows,
            &self.norm,
            &RolloutMode::Fixed { steps },
        )?;
        Ok(Some(ForwardOutput { rows: enc.rows, rollout }))
    }

    /// Inference rollout covering `anchor + horizon` for every available sensor.
    pub fn predict(&self, instance: &ForecastInstance, graph: &DiffusionGraph, needed: bool) -> Result<Vec<SensorForecast>> {
        let mut tape = Tape::new();
        let Some(enc) = self.encode(&mut tape, instance, graph)? else {
            return Ok(Vec::new());
        };
        let end = instance.anchor + instance.horizon;
        let t_last: Vec<i64> = enc
            .rows
            .iter()
            .map(|&s| instance.sensors[s].last_end().unwrap_or(instance.anchor))
            .collect();
        let cover: Vec<f64> = t_last.iter().map(|&t| (end - t) as f64).collect();
        let need: Vec<usize> = enc
            .rows
            .iter()
            .map(|&s| if needed { instance.sensors[s].targets.len() } else { 0 })
            .collect();
        let xi = self.xi();
        let budget = t_last
            .iter()
            .zip(&need)
            .map(|(&t, &l)| max_steps(end - t, xi).max(l.div_ceil(xi)))
            .max()
            .unwrap_or(1);
        let mode = RolloutMode::Until {
            cover,
            needed: need,
            max_steps: budget,
        };
        let rollout = self
            .sapn
            .rollout(&mut tape, &self.store, &self.te, enc.seq, &enc.rows, &self.norm, &mode)?;
        Ok(enc
            .rows
            .iter()
            .enumerate()
            .map(|(r, &sensor)| SensorForecast {
                sensor,
                t_last: t_last[r],
                slots: rollout.slots(&tape, r),
                truncated: rollout.truncated[r],
            })
            .collect())
    }
}

impl Forecaster for Model {
    fn name(&self) -> &str {
        match self.config.kind {
            ModelKind::Aseer => "aseer",
            ModelKind::Recurrent => "recurrent",
        }
    }

    fn forecast(&self, instance: &ForecastInstance, graph: &DiffusionGraph, needed: bool) -> Result<Vec<SensorForecast>> {
        self.predict(instance, graph, needed)
    }
}
