//! Evaluation of false-negative identification and of learned thresholds.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{forward, EncoderParams};
use crate::error::{Error, Result};
use crate::numkit::{dot, Matrix};
use crate::seeding::{self, STREAM_EVAL};
use crate::synthdata::{augment, AugmentationOp, SyntheticDataset};
use crate::threshold::solve_quantile_exact;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FnScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
}

impl FnScores {
    /// Precision is 0 with no predictions and recall is 0 with no true positives
    /// to find.
    pub fn from_counts(tp: u64, fp: u64, fn_count: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_count);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_count,
        }
    }
}

/// Running confusion counts, for accumulating over many batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_count += 1,
            (false, false) => {}
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_count += other.fn_count;
    }

    pub fn scores(&self) -> FnScores {
        FnScores::from_counts(self.tp, self.fp, self.fn_count)
    }
}

pub fn fn_scores(predicted: &[bool], truth: &[bool]) -> Result<FnScores> {
    if predicted.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} truth entries",
            predicted.len(),
            truth.len()
        )));
    }
    let mut c = Confusion::default();
    predicted.iter().zip(truth).for_each(|(&p, &t)| c.record(p, t));
    Ok(c.scores())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ThresholdError {
    pub mae: f64,
    pub rmse: f64,
}

pub fn threshold_error(learned: &[f64], optimal: &[f64]) -> Result<ThresholdError> {
    if learned.len() != optimal.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} learned thresholds vs {} reference values",
            learned.len(),
            optimal.len()
        )));
    }
    if learned.is_empty() {
        return Ok(ThresholdError::default());
    }
    let n = learned.len() as f64;
    let (abs, sq) = learned
        .iter()
        .zip(optimal)
        .fold((0.0, 0.0), |(a, s), (&x, &y)| (a + (x - y).abs(), s + (x - y).powi(2)));
    Ok(ThresholdError {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}

/// Error of per-batch thresholds `(anchor id, threshold)` against a per-anchor
/// reference, one term per sample.
pub fn sampled_threshold_error(samples: &[(usize, f64)], optimal: &[f64]) -> Result<ThresholdError> {
    let mut learned = Vec::with_capacity(samples.len());
    let mut reference = Vec::with_capacity(samples.len());
    for &(id, t) in samples {
        let opt = *optimal.get(id).ok_or(Error::IndexOutOfRange {
            index: id,
            len: optimal.len(),
        })?;
        learned.push(t);
        reference.push(opt);
    }
    threshold_error(&learned, &reference)
}

/// Epoch index used for evaluation-time augmentations, disjoint from training epochs.
pub const EVAL_EPOCH: u64 = u64::MAX;

/// Reference thresholds from precomputed embeddings.
///
/// Anchor `i` is `anchors.row(i)`. Its negative pool is row `j` of every
/// matrix in `pool_views` for all `j ≠ i`. When `sample_count` covers the
/// whole pool the exact quantile of the pool is returned; otherwise a seeded
/// subset of that size is drawn without replacement.
pub fn approx_optimal_lambda_embedded(
    anchors: &Matrix,
    pool_views: &[&Matrix],
    anchor_ids: &[usize],
    alpha: f64,
    sample_count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = anchors.rows();
    if pool_views.is_empty() || pool_views.iter().any(|v| v.shape() != anchors.shape()) {
        return Err(Error::BadConfig("pool views must match the anchor embeddings".into()));
    }
    if n < 2 {
        return Err(Error::EmptyNegatives);
    }
    if sample_count == 0 {
        return Err(Error::BadConfig("sample_count must be positive".into()));
    }
    let views = pool_views.len();
    let pool_size = views * (n - 1);
    anchor_ids
        .par_iter()
        .map(|&i| {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            let a = anchors.row(i);
            // pool position p ↦ (view p / (n−1), sample skipping i)
            let score = |p: usize| {
                let (v, r) = (p / (n - 1), p % (n - 1));
                let j = if r >= i { r + 1 } else { r };
                dot(a, pool_views[v].row(j)).clamp(-1.0, 1.0)
            };
            let scores: Vec<f64> = if sample_count >= pool_size {
                (0..pool_size).map(score).collect()
            } else {
                let mut rng = seeding::stream(seed, &[STREAM_EVAL, i as u64]);
                let mut picked = sample(&mut rng, pool_size, sample_count).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(score).collect()
            };
            Ok(solve_quantile_exact(&scores, alpha)?.kth_value)
        })
        .collect()
}

/// Reference thresholds for a frozen encoder. Anchors are view 0 and the pool
/// is views 0 and 1 of every other sample, all augmented at [`EVAL_EPOCH`].
pub fn approx_optimal_lambda(
    encoder: &EncoderParams,
    dataset: &SyntheticDataset,
    op: &AugmentationOp,
    anchor_ids: &[usize],
    alpha: f64,
    sample_count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let v0 = forward(encoder, &augment(op, dataset, &all, 0, EVAL_EPOCH)?)?.into_embeddings();
    let v1 = forward(encoder, &augment(op, dataset, &all, 1, EVAL_EPOCH)?)?.into_embeddings();
    approx_optimal_lambda_embedded(&v0, &[&v0, &v1], anchor_ids, alpha, sample_count, seed)
}

/// The machine-readable evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub fn_precision: f64,
    pub fn_recall: f64,
    pub fn_f1: f64,
    pub lambda_mae: f64,
    pub lambda_rmse: f64,
    pub predicted_fn_fraction: f64,
}

impl SummaryReport {
    pub fn new(scores: &FnScores, err: &ThresholdError, predicted_fn_fraction: f64) -> Self {
        Self {
            fn_precision: scores.precision,
            fn_recall: scores.recall,
            fn_f1: scores.f1,
            lambda_mae: err.mae,
            lambda_rmse: err.rmse,
            predicted_fn_fraction,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::numkit::normalize_rows;
    use crate::synthdata::make_gaussian_mixture;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn score_examples() {
        let truth = [true, false, true, true];
        let s = fn_scores(&truth, &truth).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = fn_scores(&[false; 4], &truth).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let s = FnScores::from_counts(2, 2, 2);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert!(matches!(fn_scores(&[true], &[]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn threshold_error_examples() {
        assert_eq!(
            threshold_error(&[0.3, 0.4], &[0.3, 0.4]).unwrap(),
            ThresholdError::default()
        );
        let e = threshold_error(&[0.1, -0.1], &[0.0, 0.0]).unwrap();
        assert!((e.mae - 0.1).abs() < 1e-15 && (e.rmse - 0.1).abs() < 1e-15);
        let e = threshold_error(&[0.0, 0.2], &[0.0, 0.0]).unwrap();
        assert!((e.mae - 0.1).abs() < 1e-15);
        assert!((e.rmse - 0.02f64.sqrt()).abs() < 1e-15);
        assert!(threshold_error(&[0.0], &[]).is_err());
    }

    #[test]
    fn sampled_error_looks_up_anchor() {
        let e = sampled_threshold_error(&[(1, 0.5), (1, 0.7), (0, 0.0)], &[0.0, 0.6]).unwrap();
        assert!((e.mae - 0.2 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn full_pool_reference_is_deterministic_and_exact() {
        let ds = make_gaussian_mixture(3, 5, 4, 0.4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = EncoderParams::init(4, 6, 3, &mut rng);
        let op = AugmentationOp::new(0.0, 1).unwrap();
        let ids: Vec<usize> = (0..ds.len()).collect();
        let a = approx_optimal_lambda(&enc, &ds, &op, &ids, 0.2, 1000, 5).unwrap();
        let b = approx_optimal_lambda(&enc, &ds, &op, &ids, 0.2, 1000, 6).unwrap();
        assert_eq!(a, b);
        // α = 1 gives the pool minimum
        let z = forward(&enc, &ds.points).unwrap().into_embeddings();
        let lo = approx_optimal_lambda(&enc, &ds, &op, &ids, 1.0, 1000, 5).unwrap();
        for i in 0..ds.len() {
            let min = (0..ds.len())
                .filter(|&j| j != i)
                .map(|j| dot(z.row(i), z.row(j)).clamp(-1.0, 1.0))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(lo[i], min);
        }
    }

    #[test]
    fn subsampled_pool_is_seeded() {
        let ds = make_gaussian_mixture(2, 20, 3, 0.5, 4).unwrap();
        let z = normalize_rows(&ds.points).unwrap();
        let ids = [0, 5, 39];
        let a = approx_optimal_lambda_embedded(&z, &[&z], &ids, 0.1, 10, 7).unwrap();
        let b = approx_optimal_lambda_embedded(&z, &[&z], &ids, 0.1, 10, 7).unwrap();
        assert_eq!(a, b);
        assert!(approx_optimal_lambda_embedded(&z, &[&z], &[40], 0.1, 10, 7).is_err());
    }

    #[test]
    fn summary_report_keys() {
        let r = SummaryReport::new(&FnScores::from_counts(1, 1, 0), &ThresholdError::default(), 0.01);
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            [
                "fn_f1",
                "fn_precision",
                "fn_recall",
                "lambda_mae",
                "lambda_rmse",
                "predicted_fn_fraction"
            ]
        );
    }

    proptest! {
        #[test]
        fn scores_are_permutation_invariant(
            pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let (p, t): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (ps, ts): (Vec<bool>, Vec<bool>) = shuffled.into_iter().unzip();
            let a = fn_scores(&p, &t).unwrap();
            prop_assert_eq!(a, fn_scores(&ps, &ts).unwrap());
            if a.precision + a.recall > 0.0 {
                prop_assert!((a.f1 - 2.0 * a.precision * a.recall / (a.precision + a.recall)).abs() < 1e-15);
            }
        }

        #[test]
        fn rmse_dominates_mae(xs in proptest::collection::vec(-1.0f64..1.0, 1..30)) {
            let zeros = vec![0.0; xs.len()];
            let e = threshold_error(&xs, &zeros).unwrap();
            prop_assert!(e.rmse + 1e-15 >= e.mae && e.mae >= 0.0);
        }
    }
}
