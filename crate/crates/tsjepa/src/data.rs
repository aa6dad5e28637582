//! Dataset ingestion, synthesis, normalization and label subsampling.
//!
//! Classification data follows the common benchmark text layout: one
//! series per line, class label in the first field, values after, tab- or
//! comma-delimited. Forecasting data is a CSV with a header row from
//! which one column is selected as a single long stream.

use crate::numerics::{standard_normal, substream};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("empty file: {0}")]
    EmptyFile(String),
    #[error("line {line}: expected {expected} values, found {found}")]
    RaggedRow { line: usize, expected: usize, found: usize },
    #[error("line {line}: cannot parse field `{field}`")]
    ParseField { line: usize, field: String },
    #[error("column `{column}` not found; available: {available:?}")]
    MissingColumn { column: String, available: Vec<String> },
    #[error("row {row}: non-finite value in column `{column}`")]
    NonFiniteCell { row: usize, column: String },
    #[error("series contains a non-finite value (series {series}, index {index})")]
    NonFiniteSeries { series: usize, index: usize },
    #[error("window length {0} must be divisible by {1} (one patch per segment)")]
    WindowNotDivisible(usize, usize),
    #[error("stream too short: {len} values for window {window} plus horizon {horizon}")]
    StreamTooShort { len: usize, window: usize, horizon: usize },
    #[error("zero variance in the train split; refusing to normalize")]
    ZeroVariance,
    #[error("dataset has no labels")]
    NoLabels,
    #[error("label fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("dataset cache is corrupt: {0}")]
    CorruptCache(String),
}

/// Fixed-length univariate series with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub series: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub source_name: String,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn series_len(&self) -> usize {
        self.series.first().map(|s| s.len()).unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0)
    }
}

/// One long stream for forecasting, split chronologically.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastStream {
    pub values: Vec<f64>,
    pub window_length: usize,
    pub train_fraction: f64,
    pub source_name: String,
}

impl ForecastStream {
    pub fn patch_length(&self) -> usize {
        self.window_length / 10
    }

    /// Index of the first test value; all training indices precede it.
    pub fn split_index(&self) -> usize {
        (self.values.len() as f64 * self.train_fraction) as usize
    }

    pub fn train_values(&self) -> &[f64] {
        &self.values[..self.split_index()]
    }

    pub fn test_values(&self) -> &[f64] {
        &self.values[self.split_index()..]
    }

    /// Sliding training windows (stride = one patch length).
    pub fn train_windows(&self) -> Vec<Vec<f64>> {
        windows(self.train_values(), self.window_length, self.patch_length())
    }
}

pub(crate) fn windows(values: &[f64], window: usize, stride: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= values.len() {
        out.push(values[start..start + window].to_vec());
        start += stride;
    }
    out
}

/// Labeled-data budget for label-efficiency experiments.
#[derive(Clone, Copy, Debug)]
pub struct LabelBudget {
    pub fraction: f64,
    pub seed: u64,
}

/// Load a delimited classification file: label first, values after.
/// Labels are remapped to a contiguous `[0, C)` range.
pub fn load_classification(path: impl AsRef<Path>) -> Result<TimeSeriesDataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut series: Vec<Vec<f64>> = Vec::new();
    let mut expected_len: Option<usize> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c| c == '\t' || c == ',')
            .map(str::trim)
            .filter(|f| !f.is_empty())
            .collect();
        let parse = |f: &str| -> Result<f64, DataError> {
            f.parse::<f64>().map_err(|_| DataError::ParseField {
                line: lineno + 1,
                field: f.to_string(),
            })
        };
        let label_val = parse(fields[0])?;
        let values: Vec<f64> =
            fields[1..].iter().map(|f| parse(f)).collect::<Result<_, _>>()?;
        if let Some(expected) = expected_len {
            if values.len() != expected {
                return Err(DataError::RaggedRow {
                    line: lineno + 1,
                    expected,
                    found: values.len(),
                });
            }
        } else {
            expected_len = Some(values.len());
        }
        if let Some(ix) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteSeries { series: series.len(), index: ix });
        }
        raw_labels.push(label_val.round() as i64);
        series.push(values);
    }
    if series.is_empty() {
        return Err(DataError::EmptyFile(path.display().to_string()));
    }

    // remap labels to contiguous [0, C) preserving numeric order
    let mut mapping: BTreeMap<i64, usize> = BTreeMap::new();
    for &l in &raw_labels {
        mapping.entry(l).or_insert(0);
    }
    for (i, v) in mapping.values_mut().enumerate() {
        *v = i;
    }
    let labels: Vec<usize> = raw_labels.iter().map(|l| mapping[l]).collect();

    Ok(TimeSeriesDataset {
        series,
        labels: Some(labels),
        source_name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}

/// Load one column of a headered CSV as a forecasting stream.
pub fn load_forecast_csv(
    path: impl AsRef<Path>,
    column: &str,
    window_length: usize,
) -> Result<ForecastStream, DataError> {
    let path = path.as_ref();
    if window_length % 10 != 0 {
        return Err(DataError::WindowNotDivisible(window_length, 10));
    }
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> =
        reader.headers().map_err(|e| DataError::CorruptCache(e.to_string()))?
            .iter().map(|h| h.trim().to_string()).collect();
    let col_ix = headers.iter().position(|h| h == column).ok_or_else(|| {
        DataError::MissingColumn { column: column.to_string(), available: headers.clone() }
    })?;
    let mut values = Vec::new();
    for (row_ix, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::CorruptCache(e.to_string()))?;
        let field = record.get(col_ix).unwrap_or("").trim();
        let v: f64 = field.parse().map_err(|_| DataError::ParseField {
            line: row_ix + 2,
            field: field.to_string(),
        })?;
        if !v.is_finite() {
            return Err(DataError::NonFiniteCell { row: row_ix, column: column.to_string() });
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(DataError::EmptyFile(path.display().to_string()));
    }
    Ok(ForecastStream {
        values,
        window_length,
        train_fraction: 0.8,
        source_name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}

/// Train-split mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Fit z-score statistics on a flat collection of train values.
pub fn fit_norm_stats<'a>(values: impl Iterator<Item = &'a f64>) -> Result<NormStats, DataError> {
    let values: Vec<f64> = values.cloned().collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 1e-24 {
        return Err(DataError::ZeroVariance);
    }
    Ok(NormStats { mean, std: var.sqrt() })
}

/// Z-normalize a dataset in place with the given (train-split) stats.
pub fn znormalize_dataset(ds: &mut TimeSeriesDataset, stats: NormStats) {
    for s in &mut ds.series {
        for v in s.iter_mut() {
            *v = (*v - stats.mean) / stats.std;
        }
    }
}

/// Fit stats on the train split and apply them to both splits.
pub fn znormalize_pair(
    train: &mut TimeSeriesDataset,
    test: &mut TimeSeriesDataset,
) -> Result<NormStats, DataError> {
    let stats = fit_norm_stats(train.series.iter().flatten())?;
    znormalize_dataset(train, stats);
    znormalize_dataset(test, stats);
    Ok(stats)
}

/// Fit on the chronological train region of a stream, apply globally.
pub fn znormalize_stream(stream: &mut ForecastStream) -> Result<NormStats, DataError> {
    let split = stream.split_index();
    let stats = fit_norm_stats(stream.values[..split].iter())?;
    for v in &mut stream.values {
        *v = (*v - stats.mean) / stats.std;
    }
    Ok(stats)
}

/// Deterministic synthetic classification data. Class `c` is a sum of
/// `c + 1` sinusoids with class-specific frequencies and a fixed
/// per-class phase template, shifted in time by one uniform per-series
/// offset, scaled by random per-harmonic amplitudes, plus Gaussian
/// noise. Like stereotyped physiological beats, a masked stretch of a
/// series is predictable from the visible stretches (class, shift and
/// amplitudes are all inferable from them), while the random shift and
/// amplitudes keep raw summary statistics from giving the class away.
pub fn synth_sine_mixture(
    n_series: usize,
    series_len: usize,
    classes: usize,
    noise_std: f64,
    seed: u64,
) -> TimeSeriesDataset {
    assert!(series_len >= 10, "series length must be at least 10");
    assert!(classes >= 1, "need at least one class");
    let mut rng = substream(seed, 0xC1A5);
    let mut series = Vec::with_capacity(n_series);
    let mut labels = Vec::with_capacity(n_series);
    for i in 0..n_series {
        let class = i % classes;
        series.push(synth_one(series_len, class, noise_std, &mut rng));
        labels.push(class);
    }
    TimeSeriesDataset { series, labels: Some(labels), source_name: "synthetic".into() }
}

/// Base frequency (cycles over the series) of harmonic `h` of `class`.
pub fn synth_frequency(class: usize, harmonic: usize) -> f64 {
    2.0 + 1.5 * class as f64 + 3.0 * harmonic as f64
}

/// Template phase of harmonic `h` of `class`: a fixed low-discrepancy
/// scramble so every class has a distinctive, reproducible shape.
pub fn synth_phase(class: usize, harmonic: usize) -> f64 {
    let golden = 0.618_033_988_749_895_f64;
    let idx = (1 + class * 7 + harmonic * 3) as f64;
    (golden * idx).fract() * std::f64::consts::TAU
}

/// Per-series, per-harmonic phase jitter (radians) around the template.
const PHASE_JITTER_STD: f64 = 0.1;

fn synth_one(len: usize, class: usize, noise_std: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    let harmonics = class + 1;
    let phases: Vec<f64> = (0..harmonics)
        .map(|h| synth_phase(class, h) + PHASE_JITTER_STD * standard_normal(rng))
        .collect();
    // Amplitudes are drawn fresh per series so that phase-insensitive
    // spectral-energy statistics alone do not give the class away; they
    // remain readable from any visible stretch of the series.
    let amps: Vec<f64> = (0..harmonics).map(|_| 0.6 + 0.8 * rng.random::<f64>()).collect();
    (0..len)
        .map(|t| {
            let x = t as f64 / len as f64;
            let mut v = 0.0;
            for h in 0..harmonics {
                v += amps[h]
                    * (std::f64::consts::TAU * synth_frequency(class, h) * x + phases[h]).sin();
            }
            v / (harmonics as f64).sqrt() + noise_std * standard_normal(rng)
        })
        .collect()
}

/// Deterministic sinusoid-plus-noise stream for forecasting experiments.
/// `period` is the cycle length in samples.
pub fn synth_stream(
    len: usize,
    period: usize,
    noise_std: f64,
    window_length: usize,
    seed: u64,
) -> ForecastStream {
    let mut rng = substream(seed, 0x57EA);
    let values = (0..len)
        .map(|t| {
            (std::f64::consts::TAU * t as f64 / period as f64).sin()
                + noise_std * standard_normal(&mut rng)
        })
        .collect();
    ForecastStream {
        values,
        window_length,
        train_fraction: 0.8,
        source_name: "synthetic-stream".into(),
    }
}

/// Stratified label subsampling with a per-class floor of one example.
/// Returns `(labeled, unlabeled)`; the unlabeled part keeps its series
/// but has labels removed.
pub fn subsample_labels(
    dataset: &TimeSeriesDataset,
    budget: &LabelBudget,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset), DataError> {
    let labels = dataset.labels.as_ref().ok_or(DataError::NoLabels)?;
    if !(budget.fraction > 0.0 && budget.fraction <= 1.0) {
        return Err(DataError::BadFraction(budget.fraction));
    }
    let n = dataset.len();
    let classes = dataset.num_classes();
    let target = ((budget.fraction * n as f64 + 0.5).floor() as usize).max(classes).min(n);

    // per-class index pools, shuffled deterministically
    let mut rng = substream(budget.seed, 0x5AB5);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    // one per class first, then round-robin proportionally
    let mut take: Vec<usize> = pools.iter().map(|p| usize::from(!p.is_empty())).collect();
    let mut total: usize = take.iter().sum();
    while total < target {
        // grow the class whose taken fraction is smallest and has spare
        let mut best: Option<usize> = None;
        let mut best_frac = f64::INFINITY;
        for (c, pool) in pools.iter().enumerate() {
            if take[c] < pool.len() {
                let frac = take[c] as f64 / pool.len() as f64;
                if frac < best_frac {
                    best_frac = frac;
                    best = Some(c);
                }
            }
        }
        match best {
            Some(c) => take[c] += 1,
            None => break,
        }
        total = take.iter().sum();
    }

    let mut chosen = vec![false; n];
    for (c, pool) in pools.iter().enumerate() {
        for &ix in pool.iter().take(take[c]) {
            chosen[ix] = true;
        }
    }

    let mut labeled = TimeSeriesDataset {
        series: Vec::new(),
        labels: Some(Vec::new()),
        source_name: dataset.source_name.clone(),
    };
    let mut unlabeled = TimeSeriesDataset {
        series: Vec::new(),
        labels: None,
        source_name: dataset.source_name.clone(),
    };
    for i in 0..n {
        if chosen[i] {
            labeled.series.push(dataset.series[i].clone());
            labeled.labels.as_mut().unwrap().push(labels[i]);
        } else {
            unlabeled.series.push(dataset.series[i].clone());
        }
    }
    Ok((labeled, unlabeled))
}

const CACHE_MAGIC: &[u8; 8] = b"TSDSET1\n";

/// Write a dataset to a binary cache that round-trips exactly.
pub fn save_cache(ds: &TimeSeriesDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    let name = ds.source_name.as_bytes();
    buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
    buf.extend_from_slice(name);
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.series_len() as u64).to_le_bytes());
    buf.push(u8::from(ds.labels.is_some()));
    for s in &ds.series {
        for v in s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(labels) = &ds.labels {
        for &l in labels {
            buf.extend_from_slice(&(l as u64).to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read a dataset cache written by [`save_cache`].
pub fn load_cache(path: impl AsRef<Path>) -> Result<TimeSeriesDataset, DataError> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let corrupt = |m: &str| DataError::CorruptCache(m.to_string());
    if buf.len() < 8 || &buf[..8] != CACHE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut at = 8usize;
    let read_u64 = |buf: &[u8], at: &mut usize| -> Result<u64, DataError> {
        let end = *at + 8;
        if end > buf.len() {
            return Err(DataError::CorruptCache("truncated".into()));
        }
        let v = u64::from_le_bytes(buf[*at..end].try_into().unwrap());
        *at = end;
        Ok(v)
    };
    let name_len = read_u64(&buf, &mut at)? as usize;
    if at + name_len > buf.len() {
        return Err(corrupt("truncated name"));
    }
    let source_name = String::from_utf8(buf[at..at + name_len].to_vec())
        .map_err(|_| corrupt("bad name encoding"))?;
    at += name_len;
    let n = read_u64(&buf, &mut at)? as usize;
    let t = read_u64(&buf, &mut at)? as usize;
    if at >= buf.len() {
        return Err(corrupt("truncated flags"));
    }
    let has_labels = buf[at] != 0;
    at += 1;
    let mut series = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = Vec::with_capacity(t);
        for _ in 0..t {
            let bits = read_u64(&buf, &mut at)?;
            s.push(f64::from_bits(bits));
        }
        series.push(s);
    }
    let labels = if has_labels {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(read_u64(&buf, &mut at)? as usize);
        }
        Some(l)
    } else {
        None
    };
    Ok(TimeSeriesDataset { series, labels, source_name })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_classification_remaps_labels() {
        let f = write_temp("2\t0.5\t1.5\n5\t1.0\t2.0\n2\t0.0\t0.0\n");
        let ds = load_classification(f.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.series_len(), 2);
        assert_eq!(ds.labels, Some(vec![0, 1, 0]));
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn ragged_rows_error_with_line() {
        let f = write_temp("1\t0.1\t0.2\t0.3\n1\t0.1\t0.2\n");
        match load_classification(f.path()) {
            Err(DataError::RaggedRow { line, expected, found }) => {
                assert_eq!((line, expected, found), (2, 3, 2));
            }
            other => panic!("expected ragged-row error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_errors() {
        let f = write_temp("1\t0.1\tabc\n");
        assert!(matches!(
            load_classification(f.path()),
            Err(DataError::ParseField { .. })
        ));
    }

    #[test]
    fn empty_file_errors() {
        let f = write_temp("");
        assert!(matches!(load_classification(f.path()), Err(DataError::EmptyFile(_))));
    }

    #[test]
    fn forecast_csv_selects_column() {
        let f = write_temp("date,HUFL,OT\n2016,1.0,5.0\n2016,2.0,6.0\n2016,3.0,7.0\n");
        let s = load_forecast_csv(f.path(), "OT", 20).unwrap();
        assert_eq!(s.values, vec![5.0, 6.0, 7.0]);
        assert_eq!(s.patch_length(), 2);
    }

    #[test]
    fn forecast_csv_missing_column_names_available() {
        let f = write_temp("date,OT\n2016,5.0\n");
        match load_forecast_csv(f.path(), "XYZ", 20) {
            Err(DataError::MissingColumn { available, .. }) => {
                assert_eq!(available, vec!["date".to_string(), "OT".to_string()]);
            }
            other => panic!("expected missing-column error, got {other:?}"),
        }
    }

    #[test]
    fn forecast_window_divisibility() {
        let f = write_temp("a,OT\n1,5.0\n");
        assert!(matches!(
            load_forecast_csv(f.path(), "OT", 35),
            Err(DataError::WindowNotDivisible(35, 10))
        ));
    }

    #[test]
    fn znormalize_two_values() {
        let mut train = TimeSeriesDataset {
            series: vec![vec![0.0, 2.0]],
            labels: None,
            source_name: "t".into(),
        };
        let mut test = TimeSeriesDataset {
            series: vec![vec![1.0]],
            labels: None,
            source_name: "t".into(),
        };
        let stats = znormalize_pair(&mut train, &mut test).unwrap();
        assert!((train.series[0][0] + 1.0).abs() < 1e-12);
        assert!((train.series[0][1] - 1.0).abs() < 1e-12);
        // test value equal to the train mean maps to zero
        assert!(test.series[0][0].abs() < 1e-12);
        assert!((stats.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn znormalize_constant_series_errors() {
        let mut train = TimeSeriesDataset {
            series: vec![vec![5.0; 20]],
            labels: None,
            source_name: "t".into(),
        };
        let mut test = train.clone();
        assert!(matches!(
            znormalize_pair(&mut train, &mut test),
            Err(DataError::ZeroVariance)
        ));
    }

    #[test]
    fn znormalize_is_idempotent() {
        let mut train = synth_sine_mixture(20, 50, 2, 0.1, 3);
        let mut test = synth_sine_mixture(10, 50, 2, 0.1, 4);
        znormalize_pair(&mut train, &mut test).unwrap();
        let once = train.clone();
        let mut test2 = test.clone();
        znormalize_pair(&mut train, &mut test2).unwrap();
        for (a, b) in train.series.iter().flatten().zip(once.series.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_sine_mixture(100, 140, 2, 0.0, 7);
        let b = synth_sine_mixture(100, 140, 2, 0.0, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(a.num_classes(), 2);
    }

    #[test]
    fn synth_class0_fft_peak_at_class_frequency() {
        // plain O(N^2) discrete Fourier transform as an independent check
        let ds = synth_sine_mixture(4, 140, 3, 0.0, 9);
        let ix = ds.labels.as_ref().unwrap().iter().position(|&l| l == 0).unwrap();
        let s = &ds.series[ix];
        let n = s.len();
        let mut mags = vec![0.0f64; n / 2];
        for (k, m) in mags.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in s.iter().enumerate() {
                let arg = std::f64::consts::TAU * k as f64 * t as f64 / n as f64;
                re += v * arg.cos();
                im -= v * arg.sin();
            }
            *m = (re * re + im * im).sqrt();
        }
        let peak = mags
            .iter()
            .enumerate()
            .skip(1)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let expected = synth_frequency(0, 0).round() as usize;
        assert_eq!(peak, expected, "spectral peak {peak}, expected {expected}");
    }

    #[test]
    fn subsample_matches_budget() {
        let ds = synth_sine_mixture(500, 20, 5, 0.0, 1);
        let (labeled, unlabeled) =
            subsample_labels(&ds, &LabelBudget { fraction: 0.05, seed: 2 }).unwrap();
        assert_eq!(labeled.len(), 25);
        assert_eq!(unlabeled.len(), 475);
        assert!(unlabeled.labels.is_none());
    }

    #[test]
    fn subsample_full_fraction() {
        let ds = synth_sine_mixture(50, 20, 2, 0.0, 1);
        let (labeled, unlabeled) =
            subsample_labels(&ds, &LabelBudget { fraction: 1.0, seed: 2 }).unwrap();
        assert_eq!(labeled.len(), 50);
        assert!(unlabeled.is_empty());
    }

    #[test]
    fn subsample_per_class_floor() {
        let ds = synth_sine_mixture(500, 20, 5, 0.0, 1);
        let (labeled, _) =
            subsample_labels(&ds, &LabelBudget { fraction: 0.002, seed: 2 }).unwrap();
        assert_eq!(labeled.len(), 5);
        let mut classes: Vec<usize> = labeled.labels.unwrap();
        classes.sort_unstable();
        assert_eq!(classes, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn subsample_is_a_partition() {
        let ds = synth_sine_mixture(97, 20, 3, 0.1, 5);
        let (labeled, unlabeled) =
            subsample_labels(&ds, &LabelBudget { fraction: 0.3, seed: 8 }).unwrap();
        assert_eq!(labeled.len() + unlabeled.len(), ds.len());
    }

    #[test]
    fn cache_round_trips_exactly() {
        let ds = synth_sine_mixture(17, 30, 3, 0.25, 12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        save_cache(&ds, &path).unwrap();
        let back = load_cache(&path).unwrap();
        assert_eq!(ds, back);
    }
}
