//! Run configuration, model and dataset files, CSV results and SVG plots.
//!
//! Floats are written as shortest round-trip decimals, so every format reloads
//! bit-exactly. Non-finite values never reach a file: models and datasets are
//! validated before saving and CSV cells for missing values are left empty.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controllers::{FeedbackGains, MpcWeights};
use crate::dataset::{CollectConfig, Dataset, DatasetMeta};
use crate::dynamics::{State, SystemParams, DEFAULT_TS};
use crate::error::{Error, Result};
use crate::experiments::MpcScenario;
use crate::koopman::{ContinuousProxy, FeatureConfig, ProxyModel, DEFAULT_DAMPING};
use crate::nn::{Activation, Mlp};
use crate::online::UpdateSchedule;
use crate::sim::{precision_zone_metrics, ControllerKind, ProxySource, ScenarioConfig, SimLog};
use crate::training::{Scheme, TrainConfig};
use crate::uncertainty::{Trajectory, UncertaintyModel};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub t_s: f64,
    /// Physical parameters for the dimensional predictive-control scenario.
    pub params: SystemParams,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        DynamicsSection {
            t_s: DEFAULT_TS,
            params: SystemParams::reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintySection {
    /// Generates the training data.
    pub collect: UncertaintyModel,
    /// Acts on the plant in deployment runs.
    pub deploy: UncertaintyModel,
    /// Unseen condition for the online-update experiment.
    pub new_condition: UncertaintyModel,
    pub mpc: UncertaintyModel,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        UncertaintySection {
            collect: UncertaintyModel::BASELINE,
            deploy: UncertaintyModel::BASELINE,
            new_condition: UncertaintyModel::NEW_V1,
            mpc: UncertaintyModel::NEW_V2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Number of trajectories collected.
    pub trajectories: usize,
    /// Samples per trajectory.
    pub samples: usize,
    pub x0_low: [f64; 4],
    pub x0_high: [f64; 4],
    pub model: TrainConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let c = CollectConfig::default();
        TrainingSection {
            trajectories: c.k,
            samples: c.m,
            x0_low: c.x0_low,
            x0_high: c.x0_high,
            model: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineSection {
    pub window: usize,
    /// `null` disables refitting.
    pub period: Option<usize>,
    pub damping: f64,
    /// Trajectories used for the insufficient-data proxy.
    pub insufficient_trajectories: usize,
    pub mpc_window: usize,
}

impl Default for OnlineSection {
    fn default() -> Self {
        OnlineSection {
            window: 100,
            period: Some(1),
            damping: DEFAULT_DAMPING,
            insufficient_trajectories: 20,
            mpc_window: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub gains: FeedbackGains,
    pub mpc: MpcWeights,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            gains: FeedbackGains::default(),
            mpc: MpcScenario::default().weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub x0: [f64; 4],
    pub duration: f64,
    /// Start of the dimensional run [m], [m/s].
    pub mpc_start_length: f64,
    pub mpc_start_rate: f64,
    pub mpc_duration: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        let m = MpcScenario::default();
        ScenarioSection {
            x0: s.x0,
            duration: s.duration,
            mpc_start_length: m.start_length,
            mpc_start_rate: m.start_rate,
            mpc_duration: m.duration,
        }
    }
}

/// Every field is optional; missing ones take the defaults above.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub dynamics: DynamicsSection,
    pub uncertainty: UncertaintySection,
    pub training: TrainingSection,
    pub online: OnlineSection,
    pub controller: ControllerSection,
    pub scenario: ScenarioSection,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dynamics.t_s > 0.0 && self.dynamics.t_s.is_finite()) {
            return Err(Error::Invalid(format!("t_s must be positive, got {}", self.dynamics.t_s)));
        }
        self.dynamics.params.validate()?;
        self.training.model.validate()?;
        self.controller.gains.validate()?;
        self.controller.mpc.validate()?;
        if self.online.window < 2 || self.online.mpc_window < 2 {
            return Err(Error::Invalid("online windows must hold at least 2 samples".into()));
        }
        if self.online.period == Some(0) {
            return Err(Error::Invalid("update period must be >= 1".into()));
        }
        if self.training.trajectories == 0 || self.training.samples < 3 {
            return Err(Error::Invalid("dataset needs >= 1 trajectory of >= 3 samples".into()));
        }
        self.scenario().validate()?;
        self.mpc_scenario().initial_state()?.check()?;
        Ok(())
    }

    /// Applies a seed to both data collection and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.model.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.training.model.seed
    }

    /// SHA-256 over the canonical JSON of the configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("configuration serializes");
        Sha256::digest(&bytes).iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.seed(),
        }
    }

    pub fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            k: self.training.trajectories,
            m: self.training.samples,
            t_s: self.dynamics.t_s,
            seed: self.seed(),
            uncertainty: self.uncertainty.collect,
            x0_low: self.training.x0_low,
            x0_high: self.training.x0_high,
        }
    }

    pub fn train_config(&self, scheme: Scheme) -> TrainConfig {
        TrainConfig {
            scheme,
            ..self.training.model.clone()
        }
    }

    /// Feedback deployment with the offline proxy.
    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            x0: self.scenario.x0,
            uncertainty: self.uncertainty.deploy,
            controller: ControllerKind::Feedback {
                gains: self.controller.gains,
            },
            proxy: ProxySource::Offline,
            duration: self.scenario.duration,
            t_s: self.dynamics.t_s,
            damping: self.online.damping,
        }
    }

    pub fn online_source(&self) -> ProxySource {
        ProxySource::Online {
            window: self.online.window,
            schedule: UpdateSchedule { period: self.online.period },
        }
    }

    pub fn mpc_scenario(&self) -> MpcScenario {
        MpcScenario {
            params: self.dynamics.params,
            start_length: self.scenario.mpc_start_length,
            start_rate: self.scenario.mpc_start_rate,
            uncertainty: self.uncertainty.mpc,
            window: self.online.mpc_window,
            weights: self.controller.mpc.clone(),
            duration: self.scenario.mpc_duration,
            damping: self.online.damping,
        }
    }
}

/// Attached to every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// Serialized proxy. Weight matrices are flattened row-major: entry `(i, j)`
/// of a `rows x cols` matrix sits at index `i * cols + j`. Operators are
/// nested arrays of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub scheme: Scheme,
    /// `[1, hidden, ..., N]`.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biases: Option<Vec<Vec<f64>>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_c: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_c: Option<Vec<Vec<f64>>>,
    pub t_s: f64,
    /// Lifted dimension.
    pub n: usize,
    /// Feature dimension.
    pub n_zeta: usize,
    pub feature: FeatureConfig,
    pub seed: u64,
    pub config_hash: String,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn flat_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect()
}

fn matrix(name: &'static str, v: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if v.len() != nrows || v.iter().any(|r| r.len() != ncols) {
        let got = format!("{}x{:?}", v.len(), v.iter().map(Vec::len).collect::<Vec<_>>());
        return Err(Error::shape(name, format!("{nrows}x{ncols}"), got));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| v[i][j]))
}

fn from_flat(name: &'static str, v: &[f64], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if v.len() != nrows * ncols {
        return Err(Error::shape(name, nrows * ncols, v.len()));
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, v))
}

impl ModelFile {
    pub fn new(model: &ProxyModel, continuous: Option<&ContinuousProxy>, scheme: Scheme, prov: &Provenance) -> Result<Self> {
        model.validate()?;
        Ok(ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            scheme,
            layer_sizes: model.lifting.layer_sizes(),
            activation: model.lifting.activation,
            weights: model.lifting.weights.iter().map(flat_row_major).collect(),
            biases: model.lifting.biases.as_ref().map(|bs| bs.iter().map(flat_row_major).collect()),
            a: rows(&model.a),
            b: rows(&model.b),
            c: rows(&model.c),
            a_c: continuous.map(|c| rows(&c.a_c)),
            b_c: continuous.map(|c| rows(&c.b_c)),
            t_s: model.t_s,
            n: model.lifted_dim(),
            n_zeta: model.feature.dim(),
            feature: model.feature,
            seed: prov.seed,
            config_hash: prov.config_hash.clone(),
        })
    }

    /// Rebuilds the discrete proxy exactly as saved.
    pub fn to_model(&self) -> Result<ProxyModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let sizes = &self.layer_sizes;
        if sizes.len() < 2 || sizes[0] != 1 || sizes.last() != Some(&self.n) {
            return Err(Error::shape("layer sizes", format!("[1, .., {}]", self.n), format!("{sizes:?}")));
        }
        if self.weights.len() != sizes.len() - 1 {
            return Err(Error::shape("weight layers", sizes.len() - 1, self.weights.len()));
        }
        if self.feature.dim() != self.n_zeta {
            return Err(Error::shape("feature dimension", self.feature.dim(), self.n_zeta));
        }
        let weights = self
            .weights
            .iter()
            .zip(sizes.windows(2))
            .map(|(w, s)| from_flat("weight matrix", w, s[1], s[0]))
            .collect::<Result<Vec<_>>>()?;
        let biases = match &self.biases {
            None => None,
            Some(bs) if bs.len() == weights.len() => Some(
                bs.iter()
                    .zip(sizes.windows(2))
                    .map(|(b, s)| from_flat("bias vector", b, s[1], 1))
                    .collect::<Result<Vec<_>>>()?,
            ),
            Some(bs) => return Err(Error::shape("bias layers", weights.len(), bs.len())),
        };
        let model = ProxyModel {
            a: matrix("A", &self.a, self.n, self.n)?,
            b: matrix("B", &self.b, self.n, self.n_zeta)?,
            c: matrix("C", &self.c, 1, self.n)?,
            lifting: Mlp {
                weights,
                biases,
                activation: self.activation,
            },
            t_s: self.t_s,
            feature: self.feature,
        };
        if let Some(a_c) = &self.a_c {
            matrix("A_c", a_c, self.n, self.n)?;
        }
        if let Some(b_c) = &self.b_c {
            matrix("B_c", b_c, self.n, self.n_zeta)?;
        }
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        // The version is checked before the layout so that older files report
        // a version mismatch rather than a parse failure.
        if let Some(v) = value.get("format_version").and_then(serde_json::Value::as_u64) {
            if v != u64::from(MODEL_FORMAT_VERSION) {
                return Err(Error::Version {
                    found: v as u32,
                    expected: MODEL_FORMAT_VERSION,
                });
            }
        }
        Ok(serde_json::from_value(value)?)
    }
}

pub fn save_model(path: &Path, model: &ProxyModel, continuous: Option<&ContinuousProxy>, scheme: Scheme, prov: &Provenance) -> Result<()> {
    ModelFile::new(model, continuous, scheme, prov)?.save(path)
}

pub fn load_model(path: &Path) -> Result<(ProxyModel, ModelFile)> {
    let file = ModelFile::load(path)?;
    Ok((file.to_model()?, file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineMeta {
    pub format_version: u32,
    pub index: usize,
    pub controller: String,
    pub uncertainty: UncertaintyModel,
    pub seed: u64,
    pub resampled: usize,
    pub config_hash: String,
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryLine {
    pub t_s: f64,
    pub t0: f64,
    /// Rows of `[alpha, lambda, alpha', lambda']`.
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<f64>,
    /// Central-difference labels; `d_labels[j]` belongs to sample `j + label_offset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_labels: Option<Vec<f64>>,
    #[serde(default)]
    pub label_offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_true: Option<Vec<f64>>,
    pub meta: LineMeta,
}

impl TrajectoryLine {
    fn to_trajectory(&self) -> Result<Trajectory> {
        let states = self
            .states
            .iter()
            .map(|s| match s.as_slice() {
                &[a, l, da, dl] => Ok(State::new(a, l, da, dl)),
                _ => Err(Error::shape("dataset state row", 4, s.len())),
            })
            .collect::<Result<Vec<_>>>()?;
        let t = Trajectory {
            t_s: self.t_s,
            t0: self.t0,
            states,
            controls: self.controls.clone(),
            d_true: self.d_true.clone(),
            labels: self.d_labels.clone(),
            label_offset: self.label_offset,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Writes one trajectory per line.
pub fn save_dataset(path: &Path, ds: &Dataset, prov: &Provenance) -> Result<()> {
    ds.validate()?;
    let mut f = BufWriter::new(fs::File::create(path)?);
    for (index, t) in ds.trajectories.iter().enumerate() {
        let line = TrajectoryLine {
            t_s: t.t_s,
            t0: t.t0,
            states: t.states.iter().map(|s| s.to_array().to_vec()).collect(),
            controls: t.controls.clone(),
            d_labels: t.labels.clone(),
            label_offset: t.label_offset,
            d_true: t.d_true.clone(),
            meta: LineMeta {
                format_version: DATASET_FORMAT_VERSION,
                index,
                controller: ds.meta.controller.clone(),
                uncertainty: ds.meta.uncertainty,
                seed: ds.meta.seed,
                resampled: ds.meta.resampled,
                config_hash: prov.config_hash.clone(),
            },
        };
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut trajectories = Vec::new();
    let mut meta: Option<LineMeta> = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrajectoryLine = serde_json::from_str(&line).map_err(|e| Error::Malformed(format!("line {}: {e}", n + 1)))?;
        if parsed.meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Version {
                found: parsed.meta.format_version,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        trajectories.push(parsed.to_trajectory()?);
        meta.get_or_insert(parsed.meta);
    }
    let meta = meta.ok_or_else(|| Error::Malformed("dataset file has no trajectories".into()))?;
    let ds = Dataset {
        t_s: trajectories[0].t_s,
        trajectories,
        meta: DatasetMeta {
            controller: meta.controller,
            uncertainty: meta.uncertainty,
            seed: meta.seed,
            resampled: meta.resampled,
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// In-memory CSV table; written with a leading `# config_hash=.. seed=..` line.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest round-trip decimal; empty for a missing value.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::shape("csv row", self.header.len(), row.len()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn render(&self, prov: &Provenance) -> String {
        let mut s = format!("# config_hash={} seed={}\n", prov.config_hash, prov.seed);
        s.push_str(&self.header.join(","));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path, prov: &Provenance) -> Result<()> {
        fs::write(path, self.render(prov))?;
        Ok(())
    }
}

pub const TRACE_COLUMNS: [&str; 14] = [
    "tau", "alpha", "lambda", "dalpha", "dlambda", "u_raw", "u_applied", "d_true", "d_hat", "abs_error", "lyapunov", "refit", "solver_iterations", "objective",
];

/// Per-step closed-loop trace.
pub fn trace_table(log: &SimLog) -> CsvTable {
    let mut t = CsvTable::new(&TRACE_COLUMNS);
    for r in &log.records {
        let s = r.state;
        t.rows.push(vec![
            cell(Some(r.tau)),
            cell(Some(s.alpha)),
            cell(Some(s.lam)),
            cell(Some(s.dalpha)),
            cell(Some(s.dlam)),
            cell(Some(r.u_raw)),
            cell(Some(r.u_applied)),
            cell(Some(r.d_true)),
            cell(Some(r.d_hat)),
            cell(Some((r.d_true - r.d_hat).abs())),
            cell(Some(r.lyapunov)),
            u8::from(r.update.is_some()).to_string(),
            r.solver_iterations.map(|i| i.to_string()).unwrap_or_default(),
            cell(r.objective),
        ]);
    }
    t
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "run", "settled", "settling_time", "rmse", "max_abs_error", "trailing_rms", "clamp_count", "clamps_after_settling", "steps", "refits", "aborted",
];

/// One row per labelled run.
pub fn metrics_table(runs: &[(&str, &SimLog)]) -> Result<CsvTable> {
    let mut t = CsvTable::new(&METRICS_COLUMNS);
    for (label, log) in runs {
        let m = precision_zone_metrics(log)?;
        t.push(vec![
            label.to_string(),
            u8::from(m.settled).to_string(),
            cell(m.settling_time),
            cell(Some(m.rmse)),
            cell(Some(m.max_abs_error)),
            cell(Some(m.trailing_rms)),
            m.clamp_count.to_string(),
            m.clamps_after_settling.to_string(),
            m.steps.to_string(),
            log.records.iter().filter(|r| r.update.is_some()).count().to_string(),
            log.aborted.as_deref().unwrap_or("").replace(',', ";"),
        ])?;
    }
    Ok(t)
}

/// A single-panel polyline chart; `series` are `(label, y)` over a shared `x`.
pub fn svg_line_plot(title: &str, x_label: &str, x: &[f64], series: &[(&str, &[f64])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let finite = |v: &&f64| v.is_finite();
    let (x0, x1) = x.iter().filter(finite).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (mut y0, mut y1) = series
        .iter()
        .flat_map(|(_, y)| y.iter().filter(finite))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(y1 > y0) {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let xs = if x1 > x0 { (W - 2.0 * PAD) / (x1 - x0) } else { 0.0 };
    let ys = (H - 2.0 * PAD) / (y1 - y0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n\
         <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"4\" y=\"{}\">{y1:.3e}</text>\n<text x=\"4\" y=\"{}\">{y0:.3e}</text>\n",
        W / 2.0,
        escape(title),
        W - 2.0 * PAD,
        H - 2.0 * PAD,
        W / 2.0,
        H - 12.0,
        escape(x_label),
        PAD + 4.0,
        H - PAD,
    );
    for (i, (label, y)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = x
            .iter()
            .zip(y.iter())
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| format!("{:.2},{:.2}", PAD + (a - x0) * xs, H - PAD - (b - y0) * ys))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            W - PAD - 120.0,
            PAD + 16.0 * (i as f64 + 1.0),
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `(alpha, lambda)` and `|d - d_hat|` against `tau`.
pub fn trace_plots(log: &SimLog) -> (String, String) {
    let tau: Vec<f64> = log.records.iter().map(|r| r.tau).collect();
    let alpha: Vec<f64> = log.records.iter().map(|r| r.state.alpha).collect();
    let lam: Vec<f64> = log.records.iter().map(|r| r.state.lam).collect();
    let err: Vec<f64> = log.records.iter().map(|r| (r.d_true - r.d_hat).abs()).collect();
    (
        svg_line_plot("states", "tau", &tau, &[("alpha", &alpha), ("lambda", &lam)]),
        svg_line_plot("prediction error", "tau", &tau, &[("|d - d_hat|", &err)]),
    )
}
