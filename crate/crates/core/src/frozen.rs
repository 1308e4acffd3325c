//! Threshold and surrogate learning against fixed embeddings.
//!
//! A single embedding per sample; inside a mini-batch every other member is a
//! negative of the anchor. Used by the oracle check to compare streaming
//! estimates with their exact full-dataset counterparts.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::contrastive::{g_hat, SurrogateState};
use crate::error::{Error, Result};
use crate::numkit::{cosine_block, dot, normalize_rows, Mask, Matrix};
use crate::seeding::{self, epoch_batches, STREAM_DATA};
use crate::threshold::{quantile_rank, solve_quantile_exact, LambdaOptimizer, QuantileSolution, ThresholdState};

/// `n` points drawn uniformly on the unit sphere in `d` dimensions.
pub fn random_unit_embeddings(n: usize, d: usize, seed: u64) -> Result<Matrix> {
    let mut rng = seeding::stream(seed, &[STREAM_DATA]);
    let m = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect())?;
    normalize_rows(&m)
}

fn batch_sims(emb: &Matrix, ids: &[usize]) -> Result<(crate::numkit::SimilarityBlock, Mask)> {
    let z = emb.select_rows(ids)?;
    let sim = cosine_block(&z, &z)?;
    let negs = Mask::from_fn(ids.len(), ids.len(), |i, j| i != j);
    Ok((sim, negs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamingFit {
    pub alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mode: LambdaOptimizer,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// Streams mini-batch subgradient updates of every anchor's threshold.
pub fn fit_thresholds(emb: &Matrix, fit: &StreamingFit) -> Result<ThresholdState> {
    if fit.batch_size < 2 {
        return Err(Error::BadConfig("batch_size must be at least 2".into()));
    }
    let mut state = ThresholdState::new(emb.rows(), fit.alpha, fit.lr, fit.beta1, fit.beta2)?;
    for epoch in 0..fit.epochs {
        for ids in epoch_batches(emb.rows(), fit.batch_size, fit.seed, epoch as u64) {
            let (sim, negs) = batch_sims(emb, &ids)?;
            state.update_masked(&ids, &sim, &negs, fit.mode)?;
        }
    }
    Ok(state)
}

/// Similarities of anchor `i` to every other row.
pub fn negative_scores(emb: &Matrix, i: usize) -> Vec<f64> {
    let a = emb.row(i);
    (0..emb.rows())
        .filter(|&j| j != i)
        .map(|j| dot(a, emb.row(j)).clamp(-1.0, 1.0))
        .collect()
}

/// Exact per-anchor solution over all other samples.
pub fn exact_solutions(emb: &Matrix, alpha: f64) -> Result<Vec<QuantileSolution>> {
    (0..emb.rows())
        .into_par_iter()
        .map(|i| solve_quantile_exact(&negative_scores(emb, i), alpha))
        .collect()
}

/// Fraction of ordered pairs `(i, j), i ≠ j` with `s_ij > λᵢ`.
pub fn predicted_fn_fraction(emb: &Matrix, lambda: &[f64]) -> Result<f64> {
    let n = emb.rows();
    if lambda.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} thresholds for {n} samples",
            lambda.len()
        )));
    }
    if n < 2 {
        return Err(Error::EmptyNegatives);
    }
    let above: usize = (0..n)
        .into_par_iter()
        .map(|i| negative_scores(emb, i).iter().filter(|&&s| s > lambda[i]).count())
        .sum();
    Ok(above as f64 / (n * (n - 1)) as f64)
}

/// Implicit per-batch thresholds of the top-k baseline: for every anchor of
/// every sampled batch, the `k`-th largest in-batch negative similarity with
/// `k = ⌈α(B − 1)⌉`. Returns `(anchor id, threshold)` samples.
pub fn fnc_batch_thresholds(
    emb: &Matrix,
    alpha: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for epoch in 0..epochs {
        for ids in epoch_batches(emb.rows(), batch_size, seed, epoch as u64) {
            let (k, _) = quantile_rank(alpha, ids.len() - 1);
            let (sim, _) = batch_sims(emb, &ids)?;
            for (a, &id) in ids.iter().enumerate() {
                let mut row: Vec<f64> = (0..ids.len()).filter(|&j| j != a).map(|j| sim.get(a, j)).collect();
                row.sort_unstable_by(|x, y| y.total_cmp(x));
                out.push((id, row[k - 1]));
            }
        }
    }
    Ok(out)
}

/// Exact `gᵢ = mean_{j≠i} exp(s_ij/τ)` over the whole dataset.
pub fn exact_g(emb: &Matrix, tau: f64) -> Vec<f64> {
    (0..emb.rows())
        .into_par_iter()
        .map(|i| {
            let s = negative_scores(emb, i);
            s.iter().map(|v| (v / tau).exp()).sum::<f64>() / s.len() as f64
        })
        .collect()
}

/// Standard error of a moving average of mini-batch means at stationarity.
///
/// A batch of `B` holds `m = B − 1` of the anchor's `N = n − 1` negatives,
/// drawn without replacement, so one batch mean has variance
/// `σ²/m · (N − m)/(N − 1)`; the moving average with weight `γ` scales that by
/// `γ/(2 − γ)`.
pub fn surrogate_standard_error(emb: &Matrix, tau: f64, gamma: f64, batch_size: usize) -> Vec<f64> {
    let n_neg = (emb.rows() - 1) as f64;
    let m = (batch_size - 1) as f64;
    let fpc = if n_neg > 1.0 { (n_neg - m) / (n_neg - 1.0) } else { 0.0 };
    (0..emb.rows())
        .into_par_iter()
        .map(|i| {
            let e: Vec<f64> = negative_scores(emb, i).iter().map(|v| (v / tau).exp()).collect();
            let mean = e.iter().sum::<f64>() / n_neg;
            let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n_neg;
            (gamma / (2.0 - gamma) * var / m * fpc).sqrt()
        })
        .collect()
}

/// Runs surrogate updates from in-batch estimates over `epochs` shuffled passes.
/// `on_step` sees the state after each batch together with that batch's ids and
/// estimates.
pub fn track_surrogates(
    emb: &Matrix,
    tau: f64,
    gamma: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    mut on_step: impl FnMut(&SurrogateState, &[usize], &[f64]),
) -> Result<SurrogateState> {
    let mut u = SurrogateState::new(emb.rows(), gamma)?;
    for epoch in 0..epochs {
        for ids in epoch_batches(emb.rows(), batch_size, seed, epoch as u64) {
            let (sim, negs) = batch_sims(emb, &ids)?;
            let ghat: Vec<f64> = (0..ids.len())
                .map(|a| g_hat(sim.row(a), negs.row(a), tau))
                .collect::<Result<_>>()?;
            u.update(&ids, &ghat)?;
            on_step(&u, &ids, &ghat);
        }
    }
    Ok(u)
}
