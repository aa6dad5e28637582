//! Evaluation protocols: frozen-probe classification, short- and
//! long-term forecasting, label-efficiency curves and learning-rate
//! sweeps.
//!
//! The frozen protocol is enforced, not assumed: the encoder parameter
//! bytes are hashed before and after probe training and any difference
//! is a hard failure.

use crate::autodiff::{MountedParams, Params, Tape, Tensor};
use crate::data::{subsample_labels, ForecastStream, LabelBudget, TimeSeriesDataset};
use crate::network::{
    encoder_forward, forecast_head_per_token, init_head_params, params_hash, NetworkError,
    TransformerConfig,
};
use crate::numerics::substream;
use crate::objectives::{
    supervised_train, train_ar, train_jepa, AdamW, ArModel, ObjectiveError, OptimizerConfig,
    PretrainConfig, TargetMode,
};
use crate::tokenizer::{patchify_batch, PatchConfig};
use rand::seq::SliceRandom;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("frozen-probe protocol violation: encoder changed during probe training")]
    FrozenProtocolViolation,
    #[error("dataset has no labels")]
    NoLabels,
    #[error("fraction list is empty")]
    EmptyFractions,
    #[error("test split too short: need {need} values (window plus horizon), have {have}")]
    TestSplitTooShort { need: usize, have: usize },
    #[error("learning-rate grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

/// Mean ± std accuracy over independent probe-head trainings.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub per_run: Vec<f64>,
}

impl ProbeResult {
    fn from_runs(per_run: Vec<f64>) -> Self {
        let n = per_run.len() as f64;
        let mean = per_run.iter().sum::<f64>() / n;
        let var = per_run.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Self { mean_accuracy: mean, std_accuracy: var.sqrt(), per_run }
    }

    pub fn num_runs(&self) -> usize {
        self.per_run.len()
    }
}

/// Forecasting error summary; `horizon_curve[k]` is the cumulative MSE
/// over the first `k + 1` rollout patches.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastResult {
    pub mse: f64,
    pub mae: f64,
    pub horizon_curve: Option<Vec<f64>>,
}

/// Probe-head training knobs. The defaults (50 epochs at 1e-3, 10
/// seeds) are shared by every method for comparability.
#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    pub seeds: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub base_seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { seeds: 10, epochs: 300, learning_rate: 3e-3, batch_size: 32, base_seed: 1000 }
    }
}

/// Mean-pooled final latents of the full patch sequence, one feature
/// vector per series. The encoder parameters are mounted frozen.
pub fn encode_features(
    encoder: &Params,
    patch_cfg: &PatchConfig,
    model_cfg: &TransformerConfig,
    series: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, EvalError> {
    let positions: Vec<usize> = (0..patch_cfg.num_patches).collect();
    let d = patch_cfg.embed_dim;
    let mut features = Vec::with_capacity(series.len());
    for chunk in series.chunks(64) {
        let batch = patchify_batch(chunk, patch_cfg)?;
        let mut tape = Tape::new();
        let enc = MountedParams::mount_frozen(&mut tape, encoder);
        let latents =
            encoder_forward(&mut tape, &enc, &batch, &positions, patch_cfg, model_cfg)?;
        let pooled = tape.mean_tokens(latents);
        let v = tape.value(pooled);
        for bi in 0..chunk.len() {
            features.push((0..d).map(|di| v[[bi, 0, di]]).collect());
        }
    }
    Ok(features)
}

fn features_tensor(features: &[Vec<f64>], idx: &[usize]) -> Tensor {
    let d = features[0].len();
    let mut t = Tensor::zeros((idx.len(), 1, d));
    for (bi, &i) in idx.iter().enumerate() {
        for di in 0..d {
            t[[bi, 0, di]] = features[i][di];
        }
    }
    t
}

/// Train a linear softmax head on fixed feature vectors.
fn train_probe_head(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    opts: &ProbeOptions,
    seed: u64,
) -> Result<Params, EvalError> {
    let d = features[0].len();
    let mut init_rng = substream(seed, 21);
    let mut shuffle_rng = substream(seed, 22);
    let mut head = init_head_params(d, classes, &mut init_rng);
    let opt_cfg = OptimizerConfig {
        learning_rate: opts.learning_rate,
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        ..Default::default()
    };
    let mut opt = AdamW::new(opt_cfg);
    for _ in 0..opts.epochs {
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for idx in order.chunks(opts.batch_size.max(1)) {
            let x = features_tensor(features, idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let mp = MountedParams::mount(&mut tape, &head);
            let x = tape.constant(x);
            let logits = tape.linear(x, mp.id("w"), Some(mp.id("b")));
            let loss = tape.cross_entropy(logits, &y);
            let grads = tape.backward(loss).map_err(ObjectiveError::from)?;
            let g = mp.grads(&tape, &grads);
            opt.step(&mut head, &g)?;
        }
    }
    Ok(head)
}

fn probe_accuracy(head: &Params, features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let idx: Vec<usize> = (0..features.len()).collect();
    let x = features_tensor(features, &idx);
    let mut tape = Tape::new();
    let mp = MountedParams::mount_frozen(&mut tape, head);
    let x = tape.constant(x);
    let logits = tape.linear(x, mp.id("w"), Some(mp.id("b")));
    let v = tape.value(logits);
    let c = v.dim().2;
    let mut correct = 0usize;
    for (bi, &label) in labels.iter().enumerate() {
        let mut best = 0;
        for ci in 1..c {
            if v[[bi, 0, ci]] > v[[bi, 0, best]] {
                best = ci;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Frozen-probe classification: train only a linear head on top of the
/// fixed encoder, once per seed, and report mean ± std test accuracy.
pub fn frozen_probe_classify(
    encoder: &Params,
    patch_cfg: &PatchConfig,
    model_cfg: &TransformerConfig,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    opts: &ProbeOptions,
) -> Result<ProbeResult, EvalError> {
    let train_labels = train.labels.as_ref().ok_or(EvalError::NoLabels)?;
    let test_labels = test.labels.as_ref().ok_or(EvalError::NoLabels)?;
    let classes = train.num_classes().max(2);
    let hash_before = params_hash(encoder);

    let train_features = encode_features(encoder, patch_cfg, model_cfg, &train.series)?;
    let test_features = encode_features(encoder, patch_cfg, model_cfg, &test.series)?;
    let mut per_run = Vec::with_capacity(opts.seeds);
    for s in 0..opts.seeds {
        let head = train_probe_head(
            &train_features,
            train_labels,
            classes,
            opts,
            opts.base_seed + s as u64,
        )?;
        per_run.push(probe_accuracy(&head, &test_features, test_labels));
    }

    if params_hash(encoder) != hash_before {
        return Err(EvalError::FrozenProtocolViolation);
    }
    Ok(ProbeResult::from_runs(per_run))
}

/// Forecast windows of the chronological test region: non-overlapping
/// contexts, each followed by `horizon` ground-truth patches.
fn test_windows(
    stream: &ForecastStream,
    horizon: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>, EvalError> {
    let w = stream.window_length;
    let l = stream.patch_length();
    let need = w + horizon * l;
    let test = stream.test_values();
    if test.len() < need {
        return Err(EvalError::TestSplitTooShort { need, have: test.len() });
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + need <= test.len() {
        out.push((
            test[start..start + w].to_vec(),
            test[start + w..start + need].to_vec(),
        ));
        start += w;
    }
    Ok(out)
}

/// A next-patch predictor: maps a context window to the following patch.
pub trait PatchForecaster {
    fn predict_next(&self, window: &[f64]) -> Result<Vec<f64>, EvalError>;
}

/// Frozen-encoder forecaster: mean-pooled latents through a linear head.
pub struct PooledForecaster {
    pub encoder: Params,
    pub head: Params,
    pub patch_cfg: PatchConfig,
    pub model_cfg: TransformerConfig,
}

impl PatchForecaster for PooledForecaster {
    fn predict_next(&self, window: &[f64]) -> Result<Vec<f64>, EvalError> {
        let features =
            encode_features(&self.encoder, &self.patch_cfg, &self.model_cfg, &[window.to_vec()])?;
        let d = features[0].len();
        let mut tape = Tape::new();
        let mp = MountedParams::mount_frozen(&mut tape, &self.head);
        let mut x = Tensor::zeros((1, 1, d));
        for di in 0..d {
            x[[0, 0, di]] = features[0][di];
        }
        let x = tape.constant(x);
        let pred = tape.linear(x, mp.id("w"), Some(mp.id("b")));
        let v = tape.value(pred);
        Ok((0..v.dim().2).map(|i| v[[0, 0, i]]).collect())
    }
}

/// Causal autoregressive forecaster: the latent at the last patch
/// position predicts the next patch.
pub struct CausalForecaster {
    pub model: ArModel,
}

impl PatchForecaster for CausalForecaster {
    fn predict_next(&self, window: &[f64]) -> Result<Vec<f64>, EvalError> {
        let patch_cfg = &self.model.patch_cfg;
        let positions: Vec<usize> = (0..patch_cfg.num_patches).collect();
        let batch = patchify_batch(&[window.to_vec()], patch_cfg)?;
        let mut tape = Tape::new();
        let enc = MountedParams::mount_frozen(&mut tape, &self.model.encoder);
        let head = MountedParams::mount_frozen(&mut tape, &self.model.head);
        let latents = encoder_forward(
            &mut tape,
            &enc,
            &batch,
            &positions,
            patch_cfg,
            &self.model.model_cfg,
        )?;
        let last = tape.gather(latents, &[patch_cfg.num_patches - 1]);
        let pred = forecast_head_per_token(&mut tape, &head, last);
        let v = tape.value(pred);
        Ok((0..v.dim().2).map(|i| v[[0, 0, i]]).collect())
    }
}

/// Train a linear next-patch head on top of a frozen encoder using the
/// stream's training windows.
pub fn train_forecast_head(
    encoder: &Params,
    patch_cfg: &PatchConfig,
    model_cfg: &TransformerConfig,
    stream: &ForecastStream,
    opts: &ProbeOptions,
) -> Result<Params, EvalError> {
    let l = stream.patch_length();
    let w = stream.window_length;
    let train = stream.train_values();
    // pairs (window, next patch), stride one patch
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    let mut start = 0;
    while start + w + l <= train.len() {
        xs.push(train[start..start + w].to_vec());
        ys.push(train[start + w..start + w + l].to_vec());
        start += l;
    }
    let features = encode_features(encoder, patch_cfg, model_cfg, &xs)?;
    let d = patch_cfg.embed_dim;
    let mut init_rng = substream(opts.base_seed, 31);
    let mut shuffle_rng = substream(opts.base_seed, 32);
    let mut head = init_head_params(d, l, &mut init_rng);
    let mut opt = AdamW::new(OptimizerConfig {
        learning_rate: opts.learning_rate,
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        ..Default::default()
    });
    for _ in 0..opts.epochs {
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for idx in order.chunks(opts.batch_size.max(1)) {
            let x = features_tensor(&features, idx);
            let mut y = Tensor::zeros((idx.len(), 1, l));
            for (bi, &i) in idx.iter().enumerate() {
                for li in 0..l {
                    y[[bi, 0, li]] = ys[i][li];
                }
            }
            let mut tape = Tape::new();
            let mp = MountedParams::mount(&mut tape, &head);
            let x = tape.constant(x);
            let pred = tape.linear(x, mp.id("w"), Some(mp.id("b")));
            let loss = tape.mse_loss(pred, y);
            let grads = tape.backward(loss).map_err(ObjectiveError::from)?;
            let g = mp.grads(&tape, &grads);
            opt.step(&mut head, &g)?;
        }
    }
    Ok(head)
}

/// Next-patch MSE and MAE over the test region, in normalized units.
pub fn short_term_forecast_eval(
    forecaster: &dyn PatchForecaster,
    stream: &ForecastStream,
) -> Result<ForecastResult, EvalError> {
    let windows = test_windows(stream, 1)?;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0usize;
    for (ctx, truth) in &windows {
        let pred = forecaster.predict_next(ctx)?;
        for (p, t) in pred.iter().zip(truth.iter()) {
            se += (p - t).powi(2);
            ae += (p - t).abs();
            count += 1;
        }
    }
    Ok(ForecastResult { mse: se / count as f64, mae: ae / count as f64, horizon_curve: None })
}

/// Autoregressive rollout: predict a patch, slide the window forward by
/// feeding the prediction back as raw input, repeat for `horizon`
/// patches. `horizon_curve[k]` accumulates the per-step MSE.
pub fn long_term_rollout(
    forecaster: &dyn PatchForecaster,
    stream: &ForecastStream,
    horizon: usize,
) -> Result<ForecastResult, EvalError> {
    assert!(horizon >= 1, "horizon must be at least 1");
    let l = stream.patch_length();
    let windows = test_windows(stream, horizon)?;
    let n = windows.len() as f64;
    let mut step_mse = vec![0.0; horizon];
    let mut step_mae = vec![0.0; horizon];
    for (ctx, truth) in &windows {
        let mut window = ctx.clone();
        for k in 0..horizon {
            let pred = forecaster.predict_next(&window)?;
            let target = &truth[k * l..(k + 1) * l];
            for (p, t) in pred.iter().zip(target.iter()) {
                step_mse[k] += (p - t).powi(2) / (l as f64 * n);
                step_mae[k] += (p - t).abs() / (l as f64 * n);
            }
            window.drain(..l);
            window.extend_from_slice(&pred);
        }
    }
    let mut curve = Vec::with_capacity(horizon);
    let mut acc = 0.0;
    for v in &step_mse {
        acc += v;
        curve.push(acc);
    }
    Ok(ForecastResult {
        mse: step_mse[0],
        mae: step_mae[0],
        horizon_curve: Some(curve),
    })
}

/// One point of the label-efficiency comparison.
#[derive(Clone, Debug)]
pub struct LabelCurvePoint {
    pub fraction: f64,
    pub probe: ProbeResult,
    pub supervised: ProbeResult,
}

/// For each label fraction: frozen-probe the pretrained encoder on the
/// labeled subset, and train a supervised transformer end-to-end on the
/// same subset. Both are repeated over seeds.
#[allow(clippy::too_many_arguments)]
pub fn label_efficiency_curve(
    encoder: &Params,
    patch_cfg: &PatchConfig,
    model_cfg: &TransformerConfig,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    fractions: &[f64],
    probe_opts: &ProbeOptions,
    supervised_cfg: &PretrainConfig,
) -> Result<Vec<LabelCurvePoint>, EvalError> {
    if fractions.is_empty() {
        return Err(EvalError::EmptyFractions);
    }
    let test_labels = test.labels.as_ref().ok_or(EvalError::NoLabels)?;
    let mut out = Vec::new();
    for (fi, &fraction) in fractions.iter().enumerate() {
        let budget = LabelBudget { fraction, seed: probe_opts.base_seed + fi as u64 };
        let (labeled, _) = subsample_labels(train, &budget)?;
        let probe =
            frozen_probe_classify(encoder, patch_cfg, model_cfg, &labeled, test, probe_opts)?;
        let mut sup_runs = Vec::with_capacity(probe_opts.seeds);
        for s in 0..probe_opts.seeds {
            let cfg = PretrainConfig {
                seed: supervised_cfg.seed + 100 * fi as u64 + s as u64,
                ..supervised_cfg.clone()
            };
            let (model, _) = supervised_train(&labeled, &cfg)?;
            let feats =
                encode_features(&model.encoder, patch_cfg, model_cfg, &test.series)?;
            sup_runs.push(probe_accuracy(&model.head, &feats, test_labels));
        }
        out.push(LabelCurvePoint {
            fraction,
            probe,
            supervised: ProbeResult::from_runs(sup_runs),
        });
    }
    Ok(out)
}

/// Which pretraining objective a sweep point uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMethod {
    Jepa,
    Ar,
}

/// One learning-rate grid point.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub learning_rate: f64,
    pub mse: f64,
    pub mae: f64,
    pub best: bool,
}

/// Full pretrain + short-term eval per grid point; the row with the
/// lowest MSE is flagged best.
pub fn lr_sweep(
    method: SweepMethod,
    stream: &ForecastStream,
    grid: &[f64],
    base_cfg: &PretrainConfig,
    probe_opts: &ProbeOptions,
) -> Result<Vec<SweepRow>, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let windows = stream.train_windows();
    let mut rows: Vec<SweepRow> = Vec::new();
    for &lr in grid {
        let cfg = PretrainConfig {
            opt: OptimizerConfig { learning_rate: lr, ..base_cfg.opt },
            ..base_cfg.clone()
        };
        let result = match method {
            SweepMethod::Jepa => {
                let (model, _) = train_jepa(&windows, &cfg, TargetMode::Ema)?;
                let head = train_forecast_head(
                    &model.encoder,
                    &cfg.patch,
                    &cfg.model,
                    stream,
                    probe_opts,
                )?;
                let f = PooledForecaster {
                    encoder: model.encoder,
                    head,
                    patch_cfg: cfg.patch,
                    model_cfg: cfg.model,
                };
                short_term_forecast_eval(&f, stream)?
            }
            SweepMethod::Ar => {
                let (model, _) = train_ar(&windows, &cfg)?;
                let f = CausalForecaster { model };
                short_term_forecast_eval(&f, stream)?
            }
        };
        rows.push(SweepRow { learning_rate: lr, mse: result.mse, mae: result.mae, best: false });
    }
    let best_ix = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mse.partial_cmp(&b.1.mse).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    rows[best_ix].best = true;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_stream;

    struct OracleForecaster {
        stream: ForecastStream,
    }

    impl PatchForecaster for OracleForecaster {
        // locate the window inside the stream and return the true next patch
        fn predict_next(&self, window: &[f64]) -> Result<Vec<f64>, EvalError> {
            let l = self.stream.patch_length();
            let w = window.len();
            let vals = &self.stream.values;
            for start in 0..=vals.len().saturating_sub(w + l) {
                if vals[start..start + w] == *window {
                    return Ok(vals[start + w..start + w + l].to_vec());
                }
            }
            panic!("oracle could not locate the window");
        }
    }

    #[test]
    fn rollout_with_oracle_is_zero() {
        let stream = synth_stream(1200, 100, 0.0, 100, 3);
        let oracle = OracleForecaster { stream: stream.clone() };
        let res = long_term_rollout(&oracle, &stream, 5).unwrap();
        let curve = res.horizon_curve.unwrap();
        assert!(curve.iter().all(|&v| v.abs() < 1e-20), "curve {curve:?}");
        assert_eq!(res.mse, 0.0);
    }

    #[test]
    fn rollout_curve_is_non_decreasing() {
        struct ZeroForecaster(usize);
        impl PatchForecaster for ZeroForecaster {
            fn predict_next(&self, _w: &[f64]) -> Result<Vec<f64>, EvalError> {
                Ok(vec![0.0; self.0])
            }
        }
        let stream = synth_stream(1500, 80, 0.1, 100, 5);
        let res = long_term_rollout(&ZeroForecaster(10), &stream, 8).unwrap();
        let curve = res.horizon_curve.unwrap();
        for k in 1..curve.len() {
            assert!(curve[k] >= curve[k - 1]);
        }
    }

    #[test]
    fn rollout_step_one_matches_short_term() {
        struct MeanForecaster(usize);
        impl PatchForecaster for MeanForecaster {
            fn predict_next(&self, w: &[f64]) -> Result<Vec<f64>, EvalError> {
                let m = w.iter().sum::<f64>() / w.len() as f64;
                Ok(vec![m; self.0])
            }
        }
        let stream = synth_stream(2100, 70, 0.05, 100, 8);
        let f = MeanForecaster(10);
        // same non-overlapping windows are used in both paths when the
        // horizon region fits, so step one agrees exactly
        let roll = long_term_rollout(&f, &stream, 1).unwrap();
        let short = short_term_forecast_eval(&f, &stream).unwrap();
        assert!((roll.mse - short.mse).abs() < 1e-12);
    }

    #[test]
    fn short_term_errors_on_tiny_test_split() {
        let mut stream = synth_stream(150, 50, 0.0, 100, 1);
        stream.train_fraction = 0.95;
        assert!(matches!(
            short_term_forecast_eval(
                &OracleForecaster { stream: stream.clone() },
                &stream
            ),
            Err(EvalError::TestSplitTooShort { .. })
        ));
    }

    #[test]
    fn probe_result_std_zero_for_identical_runs() {
        let r = ProbeResult::from_runs(vec![0.8; 10]);
        assert!(r.std_accuracy.abs() < 1e-12, "std {}", r.std_accuracy);
        assert!((r.mean_accuracy - 0.8).abs() < 1e-12);
        let min = r.per_run.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(r.mean_accuracy >= min - 1e-12);
    }

    #[test]
    fn empty_fraction_list_errors() {
        use crate::data::synth_sine_mixture;
        use crate::numerics::substream as sub;
        let patch = PatchConfig { num_patches: 4, embed_dim: 16, conv_kernel: 3, conv_channels: 4 };
        let model = TransformerConfig {
            embed_dim: 16,
            num_heads: 2,
            num_layers: 1,
            ffn_dim: 32,
            causal: false,
        };
        let mut rng = sub(0, 1);
        let enc = crate::network::init_encoder_params(&patch, &model, &mut rng);
        let ds = synth_sine_mixture(10, 40, 2, 0.1, 1);
        let err = label_efficiency_curve(
            &enc,
            &patch,
            &model,
            &ds,
            &ds,
            &[],
            &ProbeOptions::default(),
            &PretrainConfig::default(),
        );
        assert!(matches!(err, Err(EvalError::EmptyFractions)));
    }
}
