//! Patching, positional encoding and mask sampling.
//!
//! A series of length `T` becomes `num_patches` non-overlapping segments
//! of `floor(T / num_patches)` samples (any remainder is dropped). A
//! [`MaskPlan`] partitions patch indices into a masked set and a context
//! set; the masked patches are the prediction targets.
//!
//! ```
//! use tsjepa::numerics::seeded_rng;
//! use tsjepa::tokenizer::{sample_mask, sincos_positional};
//!
//! // Half-up rounding of ratio × patches: 0.70 → 7 of 10, 0.75 → 8 of 10.
//! let mut rng = seeded_rng(0);
//! assert_eq!(sample_mask(10, 0.70, &mut rng).unwrap().num_masked(), 7);
//! assert_eq!(sample_mask(10, 0.75, &mut rng).unwrap().num_masked(), 8);
//!
//! // Position 0 encodes as alternating sin(0) = 0, cos(0) = 1.
//! let row = sincos_positional(0, 8).unwrap();
//! assert_eq!(row, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
//! ```

use crate::autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum TokenizerError {
    #[error("series of length {len} is shorter than {patches} patches")]
    SeriesTooShort { len: usize, patches: usize },
    #[error("embedding dimension must be even for sin-cos pairing, got {0}")]
    OddEmbedDim(usize),
    #[error("mask ratio must lie in (0, 1), got {0}")]
    BadMaskRatio(f64),
    #[error("need at least 2 patches to mask, got {0}")]
    TooFewPatches(usize),
}

/// Patch segmentation and patch-embedding widths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub num_patches: usize,
    pub embed_dim: usize,
    /// Kernel width of the per-patch 1-D convolution.
    pub conv_kernel: usize,
    pub conv_channels: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { num_patches: 10, embed_dim: 128, conv_kernel: 3, conv_channels: 32 }
    }
}

impl PatchConfig {
    pub fn patch_length(&self, series_len: usize) -> usize {
        series_len / self.num_patches
    }
}

/// Sorted partition of patch indices into masked and context sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub context: Vec<usize>,
    pub num_patches: usize,
}

impl MaskPlan {
    pub fn num_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn num_context(&self) -> usize {
        self.context.len()
    }
}

/// Split a series into `num_patches` equal segments, dropping the
/// remainder.
pub fn patchify(series: &[f64], cfg: &PatchConfig) -> Result<Vec<Vec<f64>>, TokenizerError> {
    if series.len() < cfg.num_patches {
        return Err(TokenizerError::SeriesTooShort {
            len: series.len(),
            patches: cfg.num_patches,
        });
    }
    let l = series.len() / cfg.num_patches;
    Ok((0..cfg.num_patches).map(|i| series[i * l..(i + 1) * l].to_vec()).collect())
}

/// Patchify a batch of equal-length series into a `[batch, patches, len]`
/// tensor.
pub fn patchify_batch(series: &[Vec<f64>], cfg: &PatchConfig) -> Result<Tensor, TokenizerError> {
    let first = series.first().map(|s| s.len()).unwrap_or(0);
    let l = first / cfg.num_patches;
    let mut out = Tensor::zeros((series.len(), cfg.num_patches, l));
    for (bi, s) in series.iter().enumerate() {
        let patches = patchify(s, cfg)?;
        for (pi, p) in patches.iter().enumerate() {
            for (vi, v) in p.iter().enumerate() {
                out[[bi, pi, vi]] = *v;
            }
        }
    }
    Ok(out)
}

/// Absolute sin-cos positional encoding: entry `2i` is
/// `sin(pos / 10000^(2i/d))`, entry `2i+1` the matching cosine.
pub fn sincos_positional(position: usize, embed_dim: usize) -> Result<Vec<f64>, TokenizerError> {
    if embed_dim % 2 != 0 {
        return Err(TokenizerError::OddEmbedDim(embed_dim));
    }
    let mut out = vec![0.0; embed_dim];
    for i in 0..embed_dim / 2 {
        let arg = position as f64 / 10000f64.powf(2.0 * i as f64 / embed_dim as f64);
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    Ok(out)
}

/// Encoding rows for a list of positions as a `[1, n, d]` constant.
pub fn positional_rows(positions: &[usize], embed_dim: usize) -> Tensor {
    let mut out = Tensor::zeros((1, positions.len(), embed_dim));
    for (ri, &pos) in positions.iter().enumerate() {
        let row = sincos_positional(pos, embed_dim).expect("even embed_dim");
        for (di, v) in row.iter().enumerate() {
            out[[0, ri, di]] = *v;
        }
    }
    out
}

/// Draw a uniform mask plan. The masked count is
/// `clamp(round(ratio * num_patches), 1, num_patches - 1)` with half-up
/// rounding, so both sets stay non-empty.
pub fn sample_mask(
    num_patches: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<MaskPlan, TokenizerError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(TokenizerError::BadMaskRatio(ratio));
    }
    if num_patches < 2 {
        return Err(TokenizerError::TooFewPatches(num_patches));
    }
    let count = ((ratio * num_patches as f64 + 0.5).floor() as usize).clamp(1, num_patches - 1);
    let mut indices: Vec<usize> = (0..num_patches).collect();
    indices.shuffle(rng);
    let mut masked: Vec<usize> = indices[..count].to_vec();
    let mut context: Vec<usize> = indices[count..].to_vec();
    masked.sort_unstable();
    context.sort_unstable();
    Ok(MaskPlan { masked, context, num_patches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn patchify_ecg_shape() {
        let cfg = PatchConfig::default();
        let series: Vec<f64> = (0..140).map(|i| i as f64).collect();
        let patches = patchify(&series, &cfg).unwrap();
        assert_eq!(patches.len(), 10);
        assert!(patches.iter().all(|p| p.len() == 14));
    }

    #[test]
    fn patchify_ford_shape() {
        let cfg = PatchConfig::default();
        let series: Vec<f64> = (0..500).map(|i| i as f64).collect();
        let patches = patchify(&series, &cfg).unwrap();
        assert_eq!(patches.len(), 10);
        assert!(patches.iter().all(|p| p.len() == 50));
    }

    #[test]
    fn patchify_drops_remainder() {
        let cfg = PatchConfig::default();
        let series: Vec<f64> = (0..505).map(|i| i as f64).collect();
        let patches = patchify(&series, &cfg).unwrap();
        assert_eq!(patches.len(), 10);
        assert!(patches.iter().all(|p| p.len() == 50));
        assert_eq!(patches[9][49], 499.0); // samples 500..505 dropped
    }

    #[test]
    fn patchify_too_short_errors() {
        let cfg = PatchConfig::default();
        assert!(patchify(&[1.0; 5], &cfg).is_err());
    }

    #[test]
    fn sincos_position_zero() {
        let row = sincos_positional(0, 8).unwrap();
        assert_eq!(row, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sincos_position_one_entries() {
        let row = sincos_positional(1, 128).unwrap();
        assert!((row[0] - 0.8414709848078965).abs() < 1e-12); // sin(1)
        assert!((row[1] - 0.5403023058681398).abs() < 1e-12); // cos(1)
    }

    #[test]
    fn sincos_odd_dim_errors() {
        assert!(sincos_positional(3, 7).is_err());
    }

    #[test]
    fn sincos_rows_distinct_and_bounded() {
        let rows: Vec<Vec<f64>> =
            (0..10).map(|p| sincos_positional(p, 128).unwrap()).collect();
        for r in &rows {
            assert!(r.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j], "positions {i} and {j} collide");
            }
        }
    }

    #[test]
    fn mask_counts_from_ratio() {
        let mut rng = seeded_rng(5);
        let plan = sample_mask(10, 0.70, &mut rng).unwrap();
        assert_eq!(plan.num_masked(), 7);
        assert_eq!(plan.num_context(), 3);
        let plan = sample_mask(10, 0.75, &mut rng).unwrap();
        assert_eq!(plan.num_masked(), 8); // round(7.5) half-up
        let plan = sample_mask(2, 0.99, &mut rng).unwrap();
        assert_eq!(plan.num_masked(), 1); // clamped
    }

    #[test]
    fn mask_ratio_bounds() {
        let mut rng = seeded_rng(5);
        assert!(sample_mask(10, 0.0, &mut rng).is_err());
        assert!(sample_mask(10, 1.0, &mut rng).is_err());
    }

    #[test]
    fn mask_uniformity_over_many_draws() {
        let mut rng = seeded_rng(11);
        let draws = 10_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let plan = sample_mask(10, 0.7, &mut rng).unwrap();
            for &i in &plan.masked {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.7).abs() < 0.02, "index {i} frequency {freq}");
        }
    }

    proptest! {
        #[test]
        fn mask_plan_is_partition(n in 2usize..20, ratio in 0.01f64..0.99, seed in 0u64..500) {
            let mut rng = seeded_rng(seed);
            let plan = sample_mask(n, ratio, &mut rng).unwrap();
            prop_assert!(plan.num_masked() >= 1);
            prop_assert!(plan.num_context() >= 1);
            let mut all: Vec<usize> = plan.masked.iter().chain(&plan.context).cloned().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn patchify_partitions_truncated_series(len in 10usize..300, np in 2usize..10) {
            let cfg = PatchConfig { num_patches: np, ..Default::default() };
            let series: Vec<f64> = (0..len).map(|i| (i as f64).sin()).collect();
            if let Ok(patches) = patchify(&series, &cfg) {
                let l = len / np;
                let concat: Vec<f64> = patches.concat();
                prop_assert_eq!(&concat[..], &series[..np * l]);
            }
        }
    }
}
