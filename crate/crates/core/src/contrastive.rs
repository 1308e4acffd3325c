//! Unimodal global contrastive loss with threshold-based false-negative
//! filtering, its moving-average surrogate and stochastic gradient estimator,
//! plus the mini-batch top-k baseline.
//!
//! Batch layout: for a batch of `B` anchors the candidate columns are the
//! `2B` embeddings `[a₀ … a_{B−1}, b₀ … b_{B−1}]` (first view, then second
//! view). Anchor `i` is the first view `aᵢ`; its positive is `bᵢ`; its
//! negatives are both views of every other batch member.

use serde::{Deserialize, Serialize};

use crate::encoder::{backward, EncoderGrads, EncoderParams, ForwardTape};
use crate::error::{Error, Result};
use crate::numkit::{cosine_block, dot, Mask, Matrix, SimilarityBlock};
use crate::threshold::ThresholdState;

/// What to do when every in-batch negative of an anchor is filtered out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyFallback {
    /// Fall back to the unfiltered negatives for this step.
    #[default]
    KeepAll,
    /// Drop the anchor's negative term; only the positive pair contributes.
    SkipAnchor,
}

impl std::str::FromStr for EmptyFallback {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep_all" => Ok(Self::KeepAll),
            "skip_anchor" => Ok(Self::SkipAnchor),
            other => Err(Error::BadConfig(format!("unknown fallback `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub fallback: EmptyFallback,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::BadConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::BadConfig(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::AlphaOutOfRange(self.alpha));
        }
        Ok(())
    }
}

/// Per-anchor moving averages `uᵢ` of the mean exponentiated negative similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateState {
    pub u: Vec<f64>,
    pub gamma: f64,
    pub initialized: Vec<bool>,
}

impl SurrogateState {
    pub fn new(n: usize, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::BadConfig(format!("gamma must be in [0, 1], got {gamma}")));
        }
        Ok(Self {
            u: vec![0.0; n],
            gamma,
            initialized: vec![false; n],
        })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<f64> {
        self.initialized.get(id).and_then(|&init| init.then(|| self.u[id]))
    }

    /// `uᵢ ← (1−γ)uᵢ + γ·ĝᵢ` for listed anchors; the first update sets `uᵢ = ĝᵢ`.
    pub fn update(&mut self, anchor_ids: &[usize], ghat: &[f64]) -> Result<()> {
        if anchor_ids.len() != ghat.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} anchors and {} estimates",
                anchor_ids.len(),
                ghat.len()
            )));
        }
        for &id in anchor_ids {
            if id >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    len: self.len(),
                });
            }
        }
        for (&id, &g) in anchor_ids.iter().zip(ghat) {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::BadConfig(format!(
                    "surrogate estimate must be positive, got {g}"
                )));
            }
            if self.initialized[id] {
                self.u[id] = (1.0 - self.gamma) * self.u[id] + self.gamma * g;
            } else {
                self.u[id] = g;
                self.initialized[id] = true;
            }
        }
        Ok(())
    }
}

impl SurrogateState {
    /// [`update`](Self::update) restricted to anchors with an estimate; `None`
    /// entries (skipped anchors) keep their current value.
    pub fn update_present(&mut self, anchor_ids: &[usize], ghat: &[Option<f64>]) -> Result<()> {
        if anchor_ids.len() != ghat.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} anchors and {} estimates",
                anchor_ids.len(),
                ghat.len()
            )));
        }
        let (ids, vals): (Vec<usize>, Vec<f64>) = anchor_ids
            .iter()
            .zip(ghat)
            .filter_map(|(&id, g)| g.map(|g| (id, g)))
            .unzip();
        self.update(&ids, &vals)
    }
}

/// One mini-batch with two embedded views per anchor.
#[derive(Debug, Clone)]
pub struct BatchView {
    pub anchor_ids: Vec<usize>,
    pub embeddings_a: Matrix,
    pub embeddings_b: Matrix,
    /// `B × 2B`; row `i` is false exactly at columns `i` and `B + i`.
    pub neg_mask: Mask,
}

impl BatchView {
    pub fn new(anchor_ids: Vec<usize>, embeddings_a: Matrix, embeddings_b: Matrix) -> Result<Self> {
        let b = anchor_ids.len();
        if embeddings_a.rows() != b || embeddings_b.shape() != embeddings_a.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{b} anchors with views {:?} and {:?}",
                embeddings_a.shape(),
                embeddings_b.shape()
            )));
        }
        if b < 2 {
            return Err(Error::EmptyNegatives);
        }
        let neg_mask = Mask::from_fn(b, 2 * b, |i, j| j % b != i);
        Ok(Self {
            anchor_ids,
            embeddings_a,
            embeddings_b,
            neg_mask,
        })
    }

    pub fn size(&self) -> usize {
        self.anchor_ids.len()
    }

    /// Negatives per anchor, `2(B − 1)`.
    pub fn negatives_per_anchor(&self) -> usize {
        2 * (self.size() - 1)
    }

    /// All `2B` candidate embeddings, first view then second view.
    pub fn candidates(&self) -> Result<Matrix> {
        self.embeddings_a.vstack(&self.embeddings_b)
    }

    /// Anchor-vs-candidate similarities (`B × 2B`).
    pub fn similarity(&self) -> Result<SimilarityBlock> {
        cosine_block(&self.embeddings_a, &self.candidates()?)
    }

    /// `sim(aᵢ, bᵢ)`.
    pub fn positive(&self, i: usize) -> f64 {
        dot(self.embeddings_a.row(i), self.embeddings_b.row(i))
    }

    /// Sample index behind candidate column `j`.
    pub fn column_sample(&self, j: usize) -> usize {
        self.anchor_ids[j % self.size()]
    }

    fn check_sim(&self, sim: &SimilarityBlock) -> Result<()> {
        if sim.anchors() != self.size() || sim.negatives() != 2 * self.size() {
            return Err(Error::ShapeMismatch(format!(
                "similarity block {}x{} for a batch of {}",
                sim.anchors(),
                sim.negatives(),
                self.size()
            )));
        }
        Ok(())
    }
}

/// Which in-batch negatives survive filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub keep_mask: Mask,
    pub kept_counts: Vec<usize>,
    pub predicted_fn_fraction: f64,
}

impl FilterResult {
    fn from_keep(batch: &BatchView, keep_mask: Mask) -> Self {
        let kept_counts: Vec<usize> = (0..keep_mask.rows()).map(|i| keep_mask.row_count(i)).collect();
        let kept: usize = kept_counts.iter().sum();
        let total = batch.neg_mask.count();
        let predicted_fn_fraction = if total == 0 {
            0.0
        } else {
            1.0 - kept as f64 / total as f64
        };
        Self {
            keep_mask,
            kept_counts,
            predicted_fn_fraction,
        }
    }

    /// No filtering: every negative is kept.
    pub fn unfiltered(batch: &BatchView) -> Self {
        Self::from_keep(batch, batch.neg_mask.clone())
    }

    /// Negatives flagged as false negatives (negative but not kept).
    pub fn predicted_fn_mask(&self, batch: &BatchView) -> Mask {
        Mask::from_fn(self.keep_mask.rows(), self.keep_mask.cols(), |i, j| {
            batch.neg_mask.get(i, j) && !self.keep_mask.get(i, j)
        })
    }

    /// The negatives actually used in anchor `i`'s loss term, or `None` when
    /// the anchor's negative term is skipped.
    pub fn effective_row<'a>(&'a self, batch: &'a BatchView, i: usize, fallback: EmptyFallback) -> Option<&'a [bool]> {
        if self.kept_counts[i] > 0 {
            Some(self.keep_mask.row(i))
        } else {
            match fallback {
                EmptyFallback::KeepAll => Some(batch.neg_mask.row(i)),
                EmptyFallback::SkipAnchor => None,
            }
        }
    }

    pub fn empty_anchor_count(&self) -> usize {
        self.kept_counts.iter().filter(|&&c| c == 0).count()
    }
}

/// Keeps negatives with `sim ≤ λᵢ`.
pub fn threshold_filter(batch: &BatchView, sim: &SimilarityBlock, lambda: &ThresholdState) -> Result<FilterResult> {
    batch.check_sim(sim)?;
    for &id in &batch.anchor_ids {
        if id >= lambda.len() {
            return Err(Error::IndexOutOfRange {
                index: id,
                len: lambda.len(),
            });
        }
    }
    let keep = Mask::from_fn(batch.size(), 2 * batch.size(), |i, j| {
        batch.neg_mask.get(i, j) && sim.get(i, j) <= lambda.lambda[batch.anchor_ids[i]]
    });
    Ok(FilterResult::from_keep(batch, keep))
}

/// Removes each anchor's `k` most similar in-batch negatives; ties go to the
/// lower column index first.
pub fn fnc_filter(batch: &BatchView, sim: &SimilarityBlock, k: usize) -> Result<FilterResult> {
    batch.check_sim(sim)?;
    let available = batch.negatives_per_anchor();
    if k > available {
        return Err(Error::KTooLarge { k, available });
    }
    let mut keep = batch.neg_mask.clone();
    let mut order: Vec<usize> = Vec::with_capacity(2 * batch.size());
    for i in 0..batch.size() {
        order.clear();
        order.extend((0..2 * batch.size()).filter(|&j| batch.neg_mask.get(i, j)));
        order.sort_by(|&x, &y| sim.get(i, y).total_cmp(&sim.get(i, x)).then(x.cmp(&y)));
        for &j in &order[..k] {
            keep.set(i, j, false);
        }
    }
    Ok(FilterResult::from_keep(batch, keep))
}

/// The `k`-th largest in-batch negative similarity per anchor: the implicit
/// threshold of the top-k baseline.
pub fn fnc_thresholds(batch: &BatchView, sim: &SimilarityBlock, k: usize) -> Result<Vec<f64>> {
    batch.check_sim(sim)?;
    let available = batch.negatives_per_anchor();
    if k == 0 || k > available {
        return Err(Error::KTooLarge { k, available });
    }
    Ok((0..batch.size())
        .map(|i| {
            let mut row: Vec<f64> = (0..2 * batch.size())
                .filter(|&j| batch.neg_mask.get(i, j))
                .map(|j| sim.get(i, j))
                .collect();
            row.sort_unstable_by(|a, b| b.total_cmp(a));
            row[k - 1]
        })
        .collect())
}

/// Mean of `exp(s/τ)` over the kept entries of a row.
pub fn g_hat(sim_row: &[f64], keep_row: &[bool], tau: f64) -> Result<f64> {
    if sim_row.len() != keep_row.len() {
        return Err(Error::ShapeMismatch(
            "similarity row and keep row differ in length".into(),
        ));
    }
    let (sum, count) = sim_row
        .iter()
        .zip(keep_row)
        .filter(|(_, &k)| k)
        .fold((0.0, 0usize), |(s, c), (&v, _)| (s + (v / tau).exp(), c + 1));
    if count == 0 {
        return Err(Error::EmptyFilteredSet(0));
    }
    Ok(sum / count as f64)
}

/// In-batch `ĝᵢ` for every anchor under the fallback policy (`None` = skipped).
pub fn batch_g_hat(
    batch: &BatchView,
    sim: &SimilarityBlock,
    filter: &FilterResult,
    cfg: &LossConfig,
) -> Result<Vec<Option<f64>>> {
    batch.check_sim(sim)?;
    (0..batch.size())
        .map(|i| match filter.effective_row(batch, i, cfg.fallback) {
            Some(row) => g_hat(sim.row(i), row, cfg.tau)
                .map(Some)
                .map_err(|_| Error::EmptyFilteredSet(batch.anchor_ids[i])),
            None => Ok(None),
        })
        .collect()
}

/// Batch loss `(1/B) Σᵢ [−sim(aᵢ, bᵢ) + τ·log(Ñᵢ·ĝᵢ)]` for a given filter.
///
/// `Ñᵢ = full_negative_count × (kept fraction of in-batch negatives)` estimates
/// the size of the filtered global negative set. It only shifts the value and
/// carries no gradient.
pub fn loss_with_filter(
    batch: &BatchView,
    sim: &SimilarityBlock,
    filter: &FilterResult,
    cfg: &LossConfig,
    full_negative_count: usize,
) -> Result<f64> {
    cfg.validate()?;
    let ghat = batch_g_hat(batch, sim, filter, cfg)?;
    let per_anchor_negs = batch.negatives_per_anchor() as f64;
    let mut total = 0.0;
    for (i, g) in ghat.into_iter().enumerate() {
        total -= batch.positive(i);
        if let (Some(g), Some(row)) = (g, filter.effective_row(batch, i, cfg.fallback)) {
            let kept = row.iter().filter(|&&k| k).count() as f64;
            let size = full_negative_count as f64 * kept / per_anchor_negs;
            total += cfg.tau * (size * g).ln();
        }
    }
    Ok(total / batch.size() as f64)
}

/// Filters by the current thresholds and evaluates the batch loss.
///
/// With every `λᵢ = 1` nothing is filtered and this is the unfiltered global
/// contrastive loss estimate.
pub fn filtered_loss(
    batch: &BatchView,
    sim: &SimilarityBlock,
    lambda: &ThresholdState,
    cfg: &LossConfig,
    full_negative_count: usize,
) -> Result<(f64, FilterResult)> {
    let filter = threshold_filter(batch, sim, lambda)?;
    let loss = loss_with_filter(batch, sim, &filter, cfg, full_negative_count)?;
    Ok((loss, filter))
}

/// Gradient of the estimator with respect to both views' embeddings:
///
/// ```text
/// (1/B) Σᵢ [ −∇ sim(aᵢ, bᵢ) + (τ/uᵢ) ∇ĝᵢ ]
/// ```
///
/// with `uᵢ` held constant. Since `∂ĝᵢ/∂sᵢⱼ = exp(sᵢⱼ/τ)/(τ|K̃ᵢ|)`, each kept
/// pair gets weight `exp(sᵢⱼ/τ)/(uᵢ|K̃ᵢ|)`.
pub fn embedding_grads(
    batch: &BatchView,
    sim: &SimilarityBlock,
    filter: &FilterResult,
    u: &SurrogateState,
    cfg: &LossConfig,
) -> Result<(Matrix, Matrix)> {
    batch.check_sim(sim)?;
    let b = batch.size();
    let d = batch.embeddings_a.cols();
    let inv_b = 1.0 / b as f64;
    let mut ga = Matrix::zeros(b, d);
    let mut gb = Matrix::zeros(b, d);
    for i in 0..b {
        for k in 0..d {
            ga[(i, k)] -= inv_b * batch.embeddings_b[(i, k)];
            gb[(i, k)] -= inv_b * batch.embeddings_a[(i, k)];
        }
        let Some(row) = filter.effective_row(batch, i, cfg.fallback) else {
            continue;
        };
        let id = batch.anchor_ids[i];
        let ui = u.get(id).ok_or(Error::UninitializedSurrogate(id))?;
        let kept = row.iter().filter(|&&k| k).count();
        if kept == 0 {
            return Err(Error::EmptyFilteredSet(id));
        }
        let scale = inv_b / (ui * kept as f64);
        let anchor = batch.embeddings_a.row(i);
        for (j, &keep) in row.iter().enumerate() {
            if !keep {
                continue;
            }
            let w = scale * (sim.get(i, j) / cfg.tau).exp();
            let jj = j % b;
            let cand = if j < b {
                batch.embeddings_a.row(jj)
            } else {
                batch.embeddings_b.row(jj)
            };
            for k in 0..d {
                ga[(i, k)] += w * cand[k];
            }
            let target = if j < b { &mut ga } else { &mut gb };
            for k in 0..d {
                target[(jj, k)] += w * anchor[k];
            }
        }
    }
    Ok((ga, gb))
}

/// Stochastic gradient estimate with respect to the encoder parameters, chained
/// through both views' forward tapes.
#[allow(clippy::too_many_arguments)]
pub fn grad_estimator(
    params: &EncoderParams,
    batch: &BatchView,
    sim: &SimilarityBlock,
    filter: &FilterResult,
    u: &SurrogateState,
    cfg: &LossConfig,
    tape_a: &ForwardTape,
    tape_b: &ForwardTape,
) -> Result<EncoderGrads> {
    let (ga, gb) = embedding_grads(batch, sim, filter, u, cfg)?;
    let mut grads = backward(params, tape_a, &ga)?;
    grads.add_assign(&backward(params, tape_b, &gb)?)?;
    Ok(grads)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::encoder::forward;
    use crate::numkit::normalize_rows;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        let m = Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        normalize_rows(&m).unwrap()
    }

    fn random_batch(b: usize, d: usize, seed: u64) -> BatchView {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = unit_rows(b, d, &mut rng);
        let v = unit_rows(b, d, &mut rng);
        BatchView::new((0..b).collect(), a, v).unwrap()
    }

    fn cfg(tau: f64) -> LossConfig {
        LossConfig {
            tau,
            gamma: 0.9,
            alpha: 0.1,
            fallback: EmptyFallback::KeepAll,
        }
    }

    /// Scalar-loop reference, written from the formula without masks.
    fn naive_loss(a: &Matrix, b: &Matrix, lambda: &[f64], tau: f64, full: usize, fallback: EmptyFallback) -> f64 {
        let n = a.rows();
        let d = a.cols();
        let dotk = |x: &[f64], y: &[f64]| (0..d).map(|k| x[k] * y[k]).sum::<f64>();
        let mut total = 0.0;
        for i in 0..n {
            total -= dotk(a.row(i), b.row(i));
            let mut sum = 0.0;
            let mut kept = 0usize;
            let mut sum_all = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                for c in [a.row(j), b.row(j)] {
                    let s = dotk(a.row(i), c).clamp(-1.0, 1.0);
                    sum_all += (s / tau).exp();
                    if s <= lambda[i] {
                        sum += (s / tau).exp();
                        kept += 1;
                    }
                }
            }
            let negs = 2 * (n - 1);
            if kept > 0 {
                let est = full as f64 * kept as f64 / negs as f64;
                total += tau * (est * sum / kept as f64).ln();
            } else if fallback == EmptyFallback::KeepAll {
                total += tau * (full as f64 * sum_all / negs as f64).ln();
            }
        }
        total / n as f64
    }

    #[test]
    fn g_hat_examples() {
        assert!((g_hat(&[0.0, 0.0], &[true, true], 1.0).unwrap() - 1.0).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((g_hat(&[1.0, -1.0], &[true, true], 1.0).unwrap() - (e + 1.0 / e) / 2.0).abs() < 1e-15);
        let v = g_hat(&[0.9, 0.1, -0.5], &[false, true, true], 0.5).unwrap();
        let expected = (0.2f64.exp() + (-1.0f64).exp()) / 2.0;
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.7946).abs() < 1e-4);
        assert!(matches!(g_hat(&[0.1], &[false], 1.0), Err(Error::EmptyFilteredSet(_))));
    }

    #[test]
    fn surrogate_updates() {
        let mut s = SurrogateState::new(3, 0.5).unwrap();
        s.update(&[0], &[2.0]).unwrap();
        assert_eq!(s.get(0), Some(2.0));
        s.update(&[0], &[1.0]).unwrap();
        assert_eq!(s.get(0), Some(1.5));
        assert_eq!(s.get(1), None);
        let mut full = SurrogateState::new(1, 1.0).unwrap();
        full.update(&[0], &[3.0]).unwrap();
        full.update(&[0], &[0.25]).unwrap();
        assert_eq!(full.get(0), Some(0.25));
        assert!(matches!(s.update(&[9], &[1.0]), Err(Error::IndexOutOfRange { .. })));
        assert!(s.update(&[1], &[0.0]).is_err());
    }

    #[test]
    fn surrogate_tracks_full_mean_on_frozen_scores() {
        // full-set mean of exp(s/τ) over 100 fixed scores, sampled 10 at a time
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let scores: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tau = 0.5;
        let exact = scores.iter().map(|s| (s / tau).exp()).sum::<f64>() / 100.0;
        let mut u = SurrogateState::new(1, 0.05).unwrap();
        let mut acc = 0.0;
        let steps = 4000;
        for t in 0..steps {
            let sample: Vec<f64> = (0..10).map(|_| scores[rng.random_range(0..100)]).collect();
            let g = g_hat(&sample, &[true; 10], tau).unwrap();
            u.update(&[0], &[g]).unwrap();
            if t >= 1000 {
                acc += u.get(0).unwrap();
            }
        }
        let avg = acc / (steps - 1000) as f64;
        assert!((avg - exact).abs() < 0.02 * exact, "{avg} vs {exact}");
    }

    #[test]
    fn batch_layout() {
        let b = random_batch(4, 3, 1);
        assert_eq!(b.negatives_per_anchor(), 6);
        for i in 0..4 {
            assert_eq!(b.neg_mask.row_count(i), 6);
            assert!(!b.neg_mask.get(i, i));
            assert!(!b.neg_mask.get(i, 4 + i));
        }
        assert!(
            BatchView::new(vec![0], Matrix::zeros(1, 2), Matrix::zeros(1, 2)).is_err(),
            "one anchor has no negatives"
        );
    }

    #[test]
    fn lambda_one_keeps_every_negative() {
        let b = random_batch(5, 3, 2);
        let sim = b.similarity().unwrap();
        let lam = ThresholdState::new(5, 0.1, 0.05, 0.9, 0.98).unwrap();
        let (loss, f) = filtered_loss(&b, &sim, &lam, &cfg(0.5), 100).unwrap();
        assert_eq!(f.keep_mask, b.neg_mask);
        assert_eq!(f.predicted_fn_fraction, 0.0);
        let unf = loss_with_filter(&b, &sim, &FilterResult::unfiltered(&b), &cfg(0.5), 100).unwrap();
        assert_eq!(loss, unf);
    }

    #[test]
    fn lambda_minus_one_hits_fallback_everywhere() {
        let b = random_batch(4, 3, 3);
        let sim = b.similarity().unwrap();
        let mut lam = ThresholdState::new(4, 0.1, 0.05, 0.9, 0.98).unwrap();
        lam.lambda.iter_mut().for_each(|l| *l = -1.0);
        let f = threshold_filter(&b, &sim, &lam).unwrap();
        assert_eq!(f.empty_anchor_count(), 4);
        assert_eq!(f.predicted_fn_fraction, 1.0);
        // keep_all reverts to the unfiltered loss
        let keep_all = loss_with_filter(&b, &sim, &f, &cfg(0.5), 10).unwrap();
        let unf = loss_with_filter(&b, &sim, &FilterResult::unfiltered(&b), &cfg(0.5), 10).unwrap();
        assert!((keep_all - unf).abs() < 1e-15);
        // skip_anchor leaves only the positive terms
        let skip = LossConfig {
            fallback: EmptyFallback::SkipAnchor,
            ..cfg(0.5)
        };
        let pos = -(0..4).map(|i| b.positive(i)).sum::<f64>() / 4.0;
        assert!((loss_with_filter(&b, &sim, &f, &skip, 10).unwrap() - pos).abs() < 1e-15);
    }

    #[test]
    fn three_anchor_hand_batch_matches_reference() {
        let a = normalize_rows(&Matrix::from_rows(&[[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]]).unwrap()).unwrap();
        let v = normalize_rows(&Matrix::from_rows(&[[0.8, 0.6], [1.0, 1.0], [-0.6, 0.8]]).unwrap()).unwrap();
        let b = BatchView::new(vec![0, 1, 2], a.clone(), v.clone()).unwrap();
        let sim = b.similarity().unwrap();
        let mut lam = ThresholdState::new(3, 0.1, 0.05, 0.9, 0.98).unwrap();
        lam.lambda = vec![0.7, 0.9, 0.5];
        let (loss, _) = filtered_loss(&b, &sim, &lam, &cfg(0.3), 40).unwrap();
        let reference = naive_loss(&a, &v, &lam.lambda, 0.3, 40, EmptyFallback::KeepAll);
        assert!((loss - reference).abs() < 1e-12, "{loss} vs {reference}");
    }

    #[test]
    fn fnc_examples() {
        let b = random_batch(3, 2, 4);
        let sim = b.similarity().unwrap();
        let none = fnc_filter(&b, &sim, 0).unwrap();
        assert_eq!(none.keep_mask, b.neg_mask);
        let all = fnc_filter(&b, &sim, 4).unwrap();
        assert_eq!(all.keep_mask.count(), 0);
        assert!(matches!(
            fnc_filter(&b, &sim, 5),
            Err(Error::KTooLarge { k: 5, available: 4 })
        ));
    }

    #[test]
    fn fnc_removes_argmax_and_breaks_ties_low_index() {
        // hand-built similarity rows for a 2-anchor batch (columns a0 a1 b0 b1)
        let b = random_batch(2, 2, 5);
        let sim = SimilarityBlock {
            values: Matrix::from_rows(&[[1.0, 0.9, 0.2, 0.1], [0.5, 1.0, 0.5, 0.3]]).unwrap(),
        };
        let f = fnc_filter(&b, &sim, 1).unwrap();
        // anchor 0: negatives are a1 (0.9) and b1 (0.1); removes a1
        assert_eq!(f.keep_mask.row(0), &[false, false, false, true]);
        // anchor 1: negatives a0 (0.5) and b0 (0.5) tie; removes column 0
        assert_eq!(f.keep_mask.row(1), &[false, false, true, false]);
        assert_eq!(fnc_thresholds(&b, &sim, 1).unwrap(), vec![0.9, 0.5]);
    }

    #[test]
    fn skipped_anchor_contributes_only_positive_gradient() {
        let b = random_batch(3, 2, 6);
        let sim = b.similarity().unwrap();
        let mut lam = ThresholdState::new(3, 0.1, 0.05, 0.9, 0.98).unwrap();
        lam.lambda = vec![-1.0; 3];
        let f = threshold_filter(&b, &sim, &lam).unwrap();
        let c = LossConfig {
            fallback: EmptyFallback::SkipAnchor,
            ..cfg(0.5)
        };
        // no surrogate is needed when every anchor is skipped
        let u = SurrogateState::new(3, 1.0).unwrap();
        let (ga, gb) = embedding_grads(&b, &sim, &f, &u, &c).unwrap();
        for i in 0..3 {
            for k in 0..2 {
                assert!((ga[(i, k)] + b.embeddings_b[(i, k)] / 3.0).abs() < 1e-15);
                assert!((gb[(i, k)] + b.embeddings_a[(i, k)] / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn uninitialized_surrogate_is_an_error() {
        let b = random_batch(2, 2, 7);
        let sim = b.similarity().unwrap();
        let u = SurrogateState::new(2, 0.9).unwrap();
        let f = FilterResult::unfiltered(&b);
        assert!(matches!(
            embedding_grads(&b, &sim, &f, &u, &cfg(0.5)),
            Err(Error::UninitializedSurrogate(0))
        ));
    }

    #[test]
    fn equal_similarities_give_rank_one_pattern() {
        // Two anchors, positives orthogonal so that all negative sims are 0.
        // Each kept pair then has weight exp(0)/(u·|K|) = 1/(u·2); with B = 2,
        // ∂/∂a₀ = −b₀/2 + (1/2)·(1/(2u))·(a₁ + b₁) + contributions as a negative
        // of anchor 1: (1/2)·(1/(2u))·a₁.
        let a = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        let v = Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap();
        let b = BatchView::new(vec![0, 1], a, v).unwrap();
        let sim = b.similarity().unwrap();
        let mut u = SurrogateState::new(2, 1.0).unwrap();
        u.update(&[0, 1], &[1.0, 1.0]).unwrap();
        let f = FilterResult::unfiltered(&b);
        let (ga, gb) = embedding_grads(&b, &sim, &f, &u, &cfg(0.5)).unwrap();
        let w = 0.5 * 0.5; // (1/B)·1/(u·|K|)
        assert_eq!(ga.row(0), &[0.0, 2.0 * w, -0.5, w]);
        // b₀: −a₀/2 from its positive plus it is a negative of anchor 1: w·a₁
        assert_eq!(gb.row(0), &[-0.5, w, 0.0, 0.0]);
        assert_eq!(ga.row(1), &[2.0 * w, 0.0, w, -0.5]);
        assert_eq!(gb.row(1), &[w, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn fresh_surrogate_gives_true_batch_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = EncoderParams::init(6, 6, 3, &mut rng);
        let xa = Matrix::from_vec(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let xb = Matrix::from_vec(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let c = cfg(0.5);
        let ids = vec![0, 1, 2, 3];
        let eval = |p: &EncoderParams, filter: Option<&FilterResult>| {
            let ta = forward(p, &xa).unwrap();
            let tb = forward(p, &xb).unwrap();
            let b = BatchView::new(ids.clone(), ta.embeddings().clone(), tb.embeddings().clone()).unwrap();
            let sim = b.similarity().unwrap();
            let f = filter.cloned().unwrap_or_else(|| FilterResult::unfiltered(&b));
            (loss_with_filter(&b, &sim, &f, &c, 50).unwrap(), b, sim, f, ta, tb)
        };
        let (_, b, sim, f, ta, tb) = eval(&params, None);
        let mut u = SurrogateState::new(4, 1.0).unwrap();
        let g: Vec<f64> = batch_g_hat(&b, &sim, &f, &c)
            .unwrap()
            .into_iter()
            .map(Option::unwrap)
            .collect();
        u.update(&ids, &g).unwrap();
        let analytic = grad_estimator(&params, &b, &sim, &f, &u, &c, &ta, &tb)
            .unwrap()
            .to_flat();
        let base = params.to_flat();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut q = params.clone();
            let mut w = base.clone();
            w[k] += h;
            q.set_flat(&w).unwrap();
            let lp = eval(&q, Some(&f)).0;
            w[k] -= 2.0 * h;
            q.set_flat(&w).unwrap();
            let lm = eval(&q, Some(&f)).0;
            let num = (lp - lm) / (2.0 * h);
            let rel = (num - analytic[k]).abs() / num.abs().max(analytic[k].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {k}: {num} vs {}", analytic[k]);
        }
    }

    proptest! {
        #[test]
        fn filtered_loss_matches_reference(
            seed in 0u64..10_000,
            b in 2usize..8,
            d in 2usize..5,
            skip in any::<bool>(),
        ) {
            let batch = random_batch(b, d, seed);
            let sim = batch.similarity().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut lam = ThresholdState::new(b, 0.1, 0.05, 0.9, 0.98).unwrap();
            lam.lambda.iter_mut().for_each(|l| *l = rng.random_range(-1.0..1.0));
            let fallback = if skip { EmptyFallback::SkipAnchor } else { EmptyFallback::KeepAll };
            let c = LossConfig { fallback, ..cfg(0.2) };
            let (loss, f) = filtered_loss(&batch, &sim, &lam, &c, 200).unwrap();
            let reference = naive_loss(&batch.embeddings_a, &batch.embeddings_b, &lam.lambda, 0.2, 200, fallback);
            prop_assert!((loss - reference).abs() < 1e-12);
            // fraction identity
            let kept: usize = f.kept_counts.iter().sum();
            let total = b * 2 * (b - 1);
            prop_assert_eq!(f.predicted_fn_fraction, 1.0 - kept as f64 / total as f64);
        }

        #[test]
        fn raising_lambda_never_shrinks_keep_rows(
            seed in 0u64..10_000,
            b in 2usize..7,
            bump in 0.0f64..1.0,
        ) {
            let batch = random_batch(b, 3, seed);
            let sim = batch.similarity().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let mut lam = ThresholdState::new(b, 0.1, 0.05, 0.9, 0.98).unwrap();
            lam.lambda.iter_mut().for_each(|l| *l = rng.random_range(-1.0..1.0));
            let before = threshold_filter(&batch, &sim, &lam).unwrap();
            lam.lambda[0] = (lam.lambda[0] + bump).min(1.0);
            let after = threshold_filter(&batch, &sim, &lam).unwrap();
            for j in 0..2 * b {
                prop_assert!(!before.keep_mask.get(0, j) || after.keep_mask.get(0, j));
            }
            for i in 0..b {
                for j in 0..2 * b {
                    prop_assert!(!before.keep_mask.get(i, j) || batch.neg_mask.get(i, j));
                }
            }
        }

        #[test]
        fn fnc_removes_exactly_k(seed in 0u64..10_000, b in 2usize..7, kf in 0.0f64..1.0) {
            let batch = random_batch(b, 3, seed);
            let sim = batch.similarity().unwrap();
            let k = (kf * batch.negatives_per_anchor() as f64) as usize;
            let f = fnc_filter(&batch, &sim, k).unwrap();
            for i in 0..b {
                prop_assert_eq!(f.kept_counts[i], batch.negatives_per_anchor() - k);
            }
        }
    }
}
