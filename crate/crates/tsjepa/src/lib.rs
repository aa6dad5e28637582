//! Self-supervised representation learning for univariate time series.
//!
//! The library trains a patch-based transformer encoder by predicting the
//! latent representation of masked patches from the visible ones, with an
//! exponential-moving-average target encoder providing the prediction
//! targets. Input-space baselines (masked reconstruction, autoregressive
//! next-patch prediction, end-to-end supervised training) share the same
//! backbone, and frozen-probe classification plus short/long-term
//! forecasting evaluations measure the learned representations.
//!
//! Everything runs on the CPU in `f64` with an explicit tape-based
//! reverse-mode autodiff ([`autodiff`]) whose gradients are verified
//! against central finite differences ([`numerics`]).
//!
//! ```
//! use tsjepa::data::synth_sine_mixture;
//! use tsjepa::tokenizer::{patchify, PatchConfig};
//!
//! let ds = synth_sine_mixture(8, 140, 2, 0.1, 7);
//! let cfg = PatchConfig::default();
//! let patches = patchify(&ds.series[0], &cfg).unwrap();
//! assert_eq!(patches.len(), 10);
//! assert_eq!(patches[0].len(), 14);
//! ```

pub mod autodiff;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod network;
pub mod numerics;
pub mod objectives;
pub mod report;
pub mod tokenizer;

pub use config::ExperimentConfig;
