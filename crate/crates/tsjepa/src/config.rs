//! Experiment configuration and the run orchestrator behind the CLI.
//!
//! A run is described by one TOML file. The same file always produces the
//! same artifacts: re-running a config into a fresh directory writes
//! byte-identical traces, checkpoints and result tables.
//!
//! ```
//! use tsjepa::ExperimentConfig;
//!
//! // Unspecified sections fall back to the paper defaults.
//! let cfg: ExperimentConfig = toml::from_str(r#"
//!     task = "pretrain"
//!     method = "jepa"
//!     out_dir = "runs/demo"
//!
//!     [dataset]
//!     kind = "synthetic-classes"
//! "#).unwrap();
//! cfg.validate().unwrap();
//! assert_eq!(cfg.patch.num_patches, 10);
//! assert_eq!(cfg.model.embed_dim, 128);
//! assert_eq!(cfg.mask_ratio(), 0.70);
//! assert_eq!(cfg.ema_momentum, 0.998);
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Params;
use crate::data::{
    load_classification, load_forecast_csv, synth_sine_mixture, synth_stream, znormalize_pair,
    znormalize_stream, ForecastStream, TimeSeriesDataset,
};
use crate::evaluation::{
    frozen_probe_classify, label_efficiency_curve, long_term_rollout, lr_sweep,
    short_term_forecast_eval, train_forecast_head, CausalForecaster, PatchForecaster,
    PooledForecaster, ProbeOptions, SweepMethod,
};
use crate::network::{
    file_hash, init_encoder_params, load_checkpoint, save_checkpoint, CheckpointHeader,
    TransformerConfig,
};
use crate::numerics::substream;
use crate::objectives::{
    supervised_train, train_ar, train_jepa, train_mae, ArModel, OptimizerConfig, PretrainConfig,
    TargetMode, TrainTrace,
};
use crate::tokenizer::PatchConfig;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: String, source: Box<toml::de::Error> },
    #[error("task `{task}` needs a labeled dataset; set dataset.kind to `ucr` or `synthetic-classes`")]
    NeedsClassification { task: String },
    #[error("task `{task}` needs a forecasting stream; set dataset.kind to `csv` or `synthetic-stream`")]
    NeedsStream { task: String },
    #[error("task `{task}` with method `{method}` needs a pretrained encoder; run a pretrain task first and set `checkpoint` to its model.ckpt")]
    NeedsCheckpoint { task: String, method: String },
    #[error("method `{0}` cannot be pretrained on unlabeled data; supervised training needs dataset.kind `ucr` or `synthetic-classes`")]
    SupervisedNeedsLabels(String),
    #[error("lr-sweep supports methods `jepa` and `ar`, got `{0}`")]
    BadSweepMethod(String),
    #[error("dataset.kind `{kind}` requires `{field}` to be set")]
    MissingField { kind: String, field: String },
    #[error("mask_ratio {0} must lie strictly between 0 and 1")]
    BadMaskRatio(f64),
    #[error("ema_momentum {0} must lie in [0, 1]")]
    BadMomentum(f64),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Pretrain,
    Probe,
    Forecast,
    Rollout,
    LabelCurve,
    LrSweep,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Pretrain => "pretrain",
            Task::Probe => "probe",
            Task::Forecast => "forecast",
            Task::Rollout => "rollout",
            Task::LabelCurve => "label-curve",
            Task::LrSweep => "lr-sweep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Jepa,
    Mae,
    Ar,
    Supervised,
    Random,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Jepa => "jepa",
            Method::Mae => "mae",
            Method::Ar => "ar",
            Method::Supervised => "supervised",
            Method::Random => "random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Ucr,
    Csv,
    SyntheticClasses,
    SyntheticStream,
}

impl DatasetKind {
    fn is_classification(&self) -> bool {
        matches!(self, DatasetKind::Ucr | DatasetKind::SyntheticClasses)
    }

    fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Ucr => "ucr",
            DatasetKind::Csv => "csv",
            DatasetKind::SyntheticClasses => "synthetic-classes",
            DatasetKind::SyntheticStream => "synthetic-stream",
        }
    }
}

/// Where the data comes from. File-backed kinds need paths; synthetic
/// kinds are generated from the run seed and the shape fields below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Value column of a forecast CSV.
    pub column: Option<String>,
    /// Context window in raw values; must be a multiple of `patch.num_patches`.
    pub window_length: usize,
    pub train_fraction: f64,
    pub n_series: usize,
    pub n_test: usize,
    pub series_length: usize,
    pub classes: usize,
    pub noise_std: f64,
    pub stream_length: usize,
    pub period: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticClasses,
            train_path: None,
            test_path: None,
            column: None,
            window_length: 100,
            train_fraction: 0.8,
            n_series: 500,
            n_test: 500,
            series_length: 140,
            classes: 5,
            noise_std: 0.6,
            stream_length: 4000,
            period: 40,
        }
    }
}

/// Probe-head knobs exposed in the config file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub seeds: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub base_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let d = ProbeOptions::default();
        Self {
            seeds: d.seeds,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            base_seed: d.base_seed,
        }
    }
}

fn default_momentum() -> f64 {
    0.998
}

fn default_horizon() -> usize {
    10
}

fn default_fractions() -> Vec<f64> {
    vec![0.05, 0.10, 0.15, 0.20]
}

fn default_lr_grid() -> Vec<f64> {
    vec![1e-3, 1e-4, 1e-5, 1e-6]
}

/// One experiment, fully described. Everything downstream is a pure
/// function of this struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Accepted for symmetry with the CLI flag; runs are always
    /// deterministic and single-threaded.
    #[serde(default)]
    pub deterministic: bool,
    /// Pretrained weights to evaluate; required by evaluation tasks for
    /// every method except `random`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub patch: PatchConfig,
    #[serde(default)]
    pub model: TransformerConfig,
    #[serde(default)]
    pub optim: OptimizerConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Defaults to 0.70 for latent prediction and 0.75 for masked
    /// reconstruction when absent.
    #[serde(default)]
    pub mask_ratio: Option<f64>,
    #[serde(default = "default_momentum")]
    pub ema_momentum: f64,
    /// Rollout length in patches.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Label fractions for the label-efficiency curve.
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source: Box::new(source),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mask_ratio(&self) -> f64 {
        self.mask_ratio.unwrap_or(match self.method {
            Method::Mae => 0.75,
            _ => 0.70,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let kind = self.dataset.kind;
        let task = self.task.as_str().to_string();
        let method = self.method.as_str().to_string();
        match self.task {
            Task::Probe | Task::LabelCurve => {
                if !kind.is_classification() {
                    return Err(ConfigError::NeedsClassification { task });
                }
            }
            Task::Forecast | Task::Rollout | Task::LrSweep => {
                if kind.is_classification() {
                    return Err(ConfigError::NeedsStream { task });
                }
            }
            Task::Pretrain => {
                if self.method == Method::Supervised && !kind.is_classification() {
                    return Err(ConfigError::SupervisedNeedsLabels(method));
                }
            }
        }
        let needs_ckpt = matches!(
            self.task,
            Task::Probe | Task::Forecast | Task::Rollout | Task::LabelCurve
        ) && self.method != Method::Random;
        if needs_ckpt && self.checkpoint.is_none() {
            return Err(ConfigError::NeedsCheckpoint { task, method });
        }
        if self.task == Task::LrSweep && !matches!(self.method, Method::Jepa | Method::Ar) {
            return Err(ConfigError::BadSweepMethod(method));
        }
        match kind {
            DatasetKind::Ucr => {
                for (field, v) in
                    [("train_path", &self.dataset.train_path), ("test_path", &self.dataset.test_path)]
                {
                    if v.is_none() {
                        return Err(ConfigError::MissingField {
                            kind: kind.as_str().to_string(),
                            field: field.to_string(),
                        });
                    }
                }
            }
            DatasetKind::Csv => {
                if self.dataset.train_path.is_none() {
                    return Err(ConfigError::MissingField {
                        kind: kind.as_str().to_string(),
                        field: "train_path".to_string(),
                    });
                }
                if self.dataset.column.is_none() {
                    return Err(ConfigError::MissingField {
                        kind: kind.as_str().to_string(),
                        field: "column".to_string(),
                    });
                }
            }
            DatasetKind::SyntheticClasses | DatasetKind::SyntheticStream => {}
        }
        if let Some(r) = self.mask_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(ConfigError::BadMaskRatio(r));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(ConfigError::BadMomentum(self.ema_momentum));
        }
        if self.horizon == 0 {
            return Err(ConfigError::ZeroHorizon);
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            patch: self.patch,
            model: self.model,
            opt: self.optim,
            mask_ratio: self.mask_ratio(),
            ema_momentum: self.ema_momentum,
            seed: self.seed,
        }
    }

    pub fn probe_options(&self) -> ProbeOptions {
        ProbeOptions {
            seeds: self.probe.seeds,
            epochs: self.probe.epochs,
            learning_rate: self.probe.learning_rate,
            batch_size: self.optim.batch_size,
            base_seed: self.probe.base_seed,
        }
    }
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub std: Option<f64>,
    /// Qualifier such as `lr=1e-4`, `fraction=0.05` or `step=3`.
    pub extra: Option<String>,
    pub best: Option<bool>,
}

/// Everything a finished run reports back to the caller.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub out_dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub wall_seconds: f64,
    pub checkpoint_hash: Option<String>,
    pub summary: String,
}

enum LoadedData {
    Classification { train: TimeSeriesDataset, test: TimeSeriesDataset },
    Stream(ForecastStream),
}

fn load_data(cfg: &ExperimentConfig) -> anyhow::Result<LoadedData> {
    let d = &cfg.dataset;
    Ok(match d.kind {
        DatasetKind::Ucr => {
            let mut train = load_classification(d.train_path.as_ref().expect("validated"))?;
            let mut test = load_classification(d.test_path.as_ref().expect("validated"))?;
            znormalize_pair(&mut train, &mut test)?;
            LoadedData::Classification { train, test }
        }
        DatasetKind::SyntheticClasses => {
            let mut train =
                synth_sine_mixture(d.n_series, d.series_length, d.classes, d.noise_std, cfg.seed);
            let mut test = synth_sine_mixture(
                d.n_test,
                d.series_length,
                d.classes,
                d.noise_std,
                cfg.seed.wrapping_add(0x5EED),
            );
            znormalize_pair(&mut train, &mut test)?;
            LoadedData::Classification { train, test }
        }
        DatasetKind::Csv => {
            let mut stream = load_forecast_csv(
                d.train_path.as_ref().expect("validated"),
                d.column.as_ref().expect("validated"),
                d.window_length,
            )?;
            stream.train_fraction = d.train_fraction;
            znormalize_stream(&mut stream)?;
            LoadedData::Stream(stream)
        }
        DatasetKind::SyntheticStream => {
            let mut stream =
                synth_stream(d.stream_length, d.period, d.noise_std, d.window_length, cfg.seed);
            stream.train_fraction = d.train_fraction;
            znormalize_stream(&mut stream)?;
            LoadedData::Stream(stream)
        }
    })
}

fn dataset_name(data: &LoadedData) -> String {
    match data {
        LoadedData::Classification { train, .. } => train.source_name.clone(),
        LoadedData::Stream(s) => s.source_name.clone(),
    }
}

fn pretrain_series(data: &LoadedData) -> Vec<Vec<f64>> {
    match data {
        LoadedData::Classification { train, .. } => train.series.clone(),
        LoadedData::Stream(s) => s.train_windows(),
    }
}

/// Encoder weights plus the geometry they were trained with.
struct LoadedEncoder {
    encoder: Params,
    patch: PatchConfig,
    model: TransformerConfig,
    /// Extra checkpoint sections, e.g. the autoregressive head.
    sections: indexmap::IndexMap<String, Params>,
}

fn load_encoder(cfg: &ExperimentConfig) -> anyhow::Result<LoadedEncoder> {
    match &cfg.checkpoint {
        Some(path) => {
            let (header, mut sections) = load_checkpoint(path)?;
            let encoder = sections
                .shift_remove("encoder")
                .ok_or_else(|| anyhow::anyhow!("checkpoint {} has no encoder section", path.display()))?;
            Ok(LoadedEncoder { encoder, patch: header.patch, model: header.model, sections })
        }
        None => {
            // Random-frozen control: a freshly initialized, untrained encoder.
            let mut rng = substream(cfg.seed, 1);
            let encoder = init_encoder_params(&cfg.patch, &cfg.model, &mut rng);
            Ok(LoadedEncoder {
                encoder,
                patch: cfg.patch,
                model: cfg.model,
                sections: indexmap::IndexMap::new(),
            })
        }
    }
}

fn write_results_csv(path: &Path, rows: &[ResultRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "method", "task", "metric", "value", "std", "extra", "best"])?;
    for r in rows {
        w.write_record([
            r.dataset.as_str(),
            r.method.as_str(),
            r.task.as_str(),
            r.metric.as_str(),
            &format!("{:.17e}", r.value),
            &r.std.map(|s| format!("{s:.17e}")).unwrap_or_default(),
            r.extra.as_deref().unwrap_or(""),
            &r.best.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Execute one experiment end to end and write its artifacts into
/// `out_dir`: a config echo, `results.csv`, and for pretraining tasks a
/// checkpoint plus per-epoch trace.
pub fn run(cfg: &ExperimentConfig) -> anyhow::Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml_string())?;

    let data = load_data(cfg)?;
    let dataset = dataset_name(&data);
    let method = cfg.method.as_str().to_string();
    let task = cfg.task.as_str().to_string();
    let row = |metric: &str, value: f64, std: Option<f64>, extra: Option<String>, best: Option<bool>| ResultRow {
        dataset: dataset.clone(),
        method: method.clone(),
        task: task.clone(),
        metric: metric.to_string(),
        value,
        std,
        extra,
        best,
    };

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut checkpoint_hash = None;
    let summary;

    match cfg.task {
        Task::Pretrain => {
            let pt = cfg.pretrain_config();
            let ckpt_path = cfg.out_dir.join("model.ckpt");
            let patch_len = match &data {
                LoadedData::Classification { train, .. } => {
                    cfg.patch.patch_length(train.series_len())
                }
                LoadedData::Stream(s) => s.patch_length(),
            };
            let header = |m: &str| CheckpointHeader {
                method: m.to_string(),
                patch: cfg.patch,
                model: cfg.model,
                patch_len,
                seed: cfg.seed,
            };
            let trace = match cfg.method {
                Method::Jepa => {
                    let (model, trace) =
                        train_jepa(&pretrain_series(&data), &pt, TargetMode::Ema)?;
                    save_checkpoint(
                        &ckpt_path,
                        &header("jepa"),
                        &[("encoder", &model.encoder), ("predictor", &model.predictor)],
                    )?;
                    trace
                }
                Method::Mae => {
                    let (model, trace) = train_mae(&pretrain_series(&data), &pt)?;
                    save_checkpoint(
                        &ckpt_path,
                        &header("mae"),
                        &[("encoder", &model.encoder), ("decoder", &model.decoder)],
                    )?;
                    trace
                }
                Method::Ar => {
                    let (model, trace) = train_ar(&pretrain_series(&data), &pt)?;
                    save_checkpoint(
                        &ckpt_path,
                        &header("ar"),
                        &[("encoder", &model.encoder), ("head", &model.head)],
                    )?;
                    trace
                }
                Method::Supervised => {
                    let LoadedData::Classification { train, .. } = &data else {
                        unreachable!("validated")
                    };
                    let (model, trace) = supervised_train(train, &pt)?;
                    save_checkpoint(
                        &ckpt_path,
                        &header("supervised"),
                        &[("encoder", &model.encoder), ("head", &model.head)],
                    )?;
                    trace
                }
                Method::Random => {
                    let mut rng = substream(cfg.seed, 1);
                    let encoder = init_encoder_params(&cfg.patch, &cfg.model, &mut rng);
                    save_checkpoint(&ckpt_path, &header("random"), &[("encoder", &encoder)])?;
                    TrainTrace::default()
                }
            };
            trace.write_csv(cfg.out_dir.join("trace.csv"))?;
            let final_loss = trace.epoch_loss.last().copied().unwrap_or(0.0);
            let final_std = trace.collapse_std.last().copied().unwrap_or(0.0);
            rows.push(row("final_loss", final_loss, None, None, None));
            rows.push(row("final_collapse_std", final_std, None, None, None));
            checkpoint_hash = Some(file_hash(&ckpt_path)?);
            summary = format!(
                "{task} {method} on {dataset}: final loss {final_loss:.6}, checkpoint {}",
                ckpt_path.display()
            );
        }
        Task::Probe => {
            let LoadedData::Classification { train, test } = &data else { unreachable!("validated") };
            let enc = load_encoder(cfg)?;
            let result = frozen_probe_classify(
                &enc.encoder,
                &enc.patch,
                &enc.model,
                train,
                test,
                &cfg.probe_options(),
            )?;
            rows.push(row(
                "accuracy",
                result.mean_accuracy,
                Some(result.std_accuracy),
                None,
                None,
            ));
            summary = format!(
                "{task} {method} on {dataset}: accuracy {:.4} ± {:.4} over {} seeds",
                result.mean_accuracy,
                result.std_accuracy,
                result.num_runs()
            );
        }
        Task::Forecast | Task::Rollout => {
            let LoadedData::Stream(stream) = &data else { unreachable!("validated") };
            let enc = load_encoder(cfg)?;
            let forecaster: Box<dyn PatchForecaster> = if cfg.method == Method::Ar {
                let head = enc.sections.get("head").cloned().ok_or_else(|| {
                    anyhow::anyhow!(
                        "method `ar` needs a checkpoint with a head section; pretrain with method = \"ar\""
                    )
                })?;
                Box::new(CausalForecaster {
                    model: ArModel {
                        encoder: enc.encoder,
                        head,
                        patch_cfg: enc.patch,
                        model_cfg: TransformerConfig { causal: true, ..enc.model },
                    },
                })
            } else {
                let head = train_forecast_head(
                    &enc.encoder,
                    &enc.patch,
                    &enc.model,
                    stream,
                    &cfg.probe_options(),
                )?;
                Box::new(PooledForecaster {
                    encoder: enc.encoder,
                    head,
                    patch_cfg: enc.patch,
                    model_cfg: enc.model,
                })
            };
            let result = if cfg.task == Task::Forecast {
                short_term_forecast_eval(forecaster.as_ref(), stream)?
            } else {
                long_term_rollout(forecaster.as_ref(), stream, cfg.horizon)?
            };
            rows.push(row("mse", result.mse, None, None, None));
            rows.push(row("mae", result.mae, None, None, None));
            if let Some(curve) = &result.horizon_curve {
                for (k, v) in curve.iter().enumerate() {
                    rows.push(row("cum_mse", *v, None, Some(format!("step={}", k + 1)), None));
                }
            }
            summary = format!(
                "{task} {method} on {dataset}: mse {:.6}, mae {:.6}",
                result.mse, result.mae
            );
        }
        Task::LabelCurve => {
            let LoadedData::Classification { train, test } = &data else { unreachable!("validated") };
            let enc = load_encoder(cfg)?;
            let points = label_efficiency_curve(
                &enc.encoder,
                &enc.patch,
                &enc.model,
                train,
                test,
                &cfg.fractions,
                &cfg.probe_options(),
                &cfg.pretrain_config(),
            )?;
            for p in &points {
                let extra = Some(format!("fraction={}", p.fraction));
                rows.push(row(
                    "probe_accuracy",
                    p.probe.mean_accuracy,
                    Some(p.probe.std_accuracy),
                    extra.clone(),
                    None,
                ));
                rows.push(row(
                    "supervised_accuracy",
                    p.supervised.mean_accuracy,
                    Some(p.supervised.std_accuracy),
                    extra,
                    None,
                ));
            }
            summary = format!("{task} {method} on {dataset}: {} fractions", points.len());
        }
        Task::LrSweep => {
            let LoadedData::Stream(stream) = &data else { unreachable!("validated") };
            let sweep_method =
                if cfg.method == Method::Jepa { SweepMethod::Jepa } else { SweepMethod::Ar };
            let sweep = lr_sweep(
                sweep_method,
                stream,
                &cfg.lr_grid,
                &cfg.pretrain_config(),
                &cfg.probe_options(),
            )?;
            for r in &sweep {
                let extra = Some(format!("lr={:e}", r.learning_rate));
                rows.push(row("mse", r.mse, None, extra.clone(), Some(r.best)));
                rows.push(row("mae", r.mae, None, extra, Some(r.best)));
            }
            let best = sweep.iter().find(|r| r.best).expect("non-empty sweep has a best row");
            summary = format!(
                "{task} {method} on {dataset}: best lr {:e} with mse {:.6}",
                best.learning_rate, best.mse
            );
        }
    }

    write_results_csv(&cfg.out_dir.join("results.csv"), &rows)?;
    Ok(RunResult {
        out_dir: cfg.out_dir.clone(),
        rows,
        wall_seconds: start.elapsed().as_secs_f64(),
        checkpoint_hash,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml() -> String {
        r#"
task = "pretrain"
method = "jepa"
seed = 7
out_dir = "runs/demo"

[dataset]
kind = "synthetic-classes"
n_series = 20
n_test = 20
series_length = 40
classes = 2
"#
        .to_string()
    }

    fn parse(s: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|source| ConfigError::Parse {
                path: "<inline>".into(),
                source: Box::new(source),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = parse(&base_toml()).unwrap();
        assert_eq!(cfg.patch.num_patches, 10);
        assert_eq!(cfg.patch.embed_dim, 128);
        assert_eq!(cfg.model.num_heads, 2);
        assert_eq!(cfg.optim.batch_size, 32);
        assert!((cfg.ema_momentum - 0.998).abs() < 1e-15);
        assert!((cfg.mask_ratio() - 0.70).abs() < 1e-15);
    }

    #[test]
    fn mae_default_mask_ratio_is_higher() {
        let s = base_toml().replace("method = \"jepa\"", "method = \"mae\"");
        let cfg = parse(&s).unwrap();
        assert!((cfg.mask_ratio() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn probe_without_checkpoint_is_rejected_with_hint() {
        let s = base_toml().replace("task = \"pretrain\"", "task = \"probe\"");
        let err = parse(&s).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pretrain"), "hint missing: {msg}");
        assert!(msg.contains("checkpoint"), "hint missing: {msg}");
    }

    #[test]
    fn probe_of_random_encoder_needs_no_checkpoint() {
        let s = base_toml()
            .replace("task = \"pretrain\"", "task = \"probe\"")
            .replace("method = \"jepa\"", "method = \"random\"");
        assert!(parse(&s).is_ok());
    }

    #[test]
    fn forecast_on_classification_data_is_rejected() {
        let s = base_toml()
            .replace("task = \"pretrain\"", "task = \"forecast\"")
            .replace("seed = 7", "seed = 7\ncheckpoint = \"x.ckpt\"");
        assert!(matches!(parse(&s), Err(ConfigError::NeedsStream { .. })));
    }

    #[test]
    fn ucr_kind_requires_paths() {
        let s = base_toml().replace("kind = \"synthetic-classes\"", "kind = \"ucr\"");
        let err = parse(&s).unwrap_err();
        assert!(matches!(err, ConfigError::MissingField { .. }), "{err}");
    }

    #[test]
    fn sweep_method_restricted() {
        let s = base_toml()
            .replace("task = \"pretrain\"", "task = \"lr-sweep\"")
            .replace("method = \"jepa\"", "method = \"mae\"")
            .replace("kind = \"synthetic-classes\"", "kind = \"synthetic-stream\"");
        assert!(matches!(parse(&s), Err(ConfigError::BadSweepMethod(_))));
    }

    #[test]
    fn bad_mask_ratio_rejected() {
        // top-level keys must precede the [dataset] table
        let s = base_toml().replace("seed = 7", "seed = 7\nmask_ratio = 1.0");
        assert!(matches!(parse(&s), Err(ConfigError::BadMaskRatio(_))));
    }

    #[test]
    fn config_echo_round_trips() {
        let cfg = parse(&base_toml()).unwrap();
        let echoed: ExperimentConfig = toml::from_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, echoed);
    }
}
