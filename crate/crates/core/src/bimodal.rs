//! Two-tower variant: image and text encoders, cross-modal similarities, and
//! per-modality thresholds and surrogates.
//!
//! For a batch of `B` aligned pairs the cross similarity is `S = Z_I Z_Tᵀ`
//! (`B × B`). Image anchor `i` contrasts against the texts in row `i`; text
//! anchor `j` contrasts against the images in column `j`. In both directions
//! the anchor's own pair (the diagonal) is the positive and is never a
//! negative. The per-pair loss is
//!
//! ```text
//! −2 S_ii + τ log(Ñ_I,i · ĝ_I,i) + τ log(Ñ_T,i · ĝ_T,i)
//! ```

use crate::contrastive::{g_hat, EmptyFallback, LossConfig, SurrogateState};
use crate::encoder::{backward, forward, EncoderGrads, EncoderParams, ForwardTape};
use crate::error::{Error, Result};
use crate::numkit::{cosine_block, Mask, Matrix, SimilarityBlock};
use crate::threshold::{LambdaOptimizer, ThresholdState};

#[derive(Debug, Clone, PartialEq)]
pub struct TowerPair {
    pub image: EncoderParams,
    pub text: EncoderParams,
}

impl TowerPair {
    pub fn new(image: EncoderParams, text: EncoderParams) -> Result<Self> {
        if image.d_emb() != text.d_emb() {
            return Err(Error::DimMismatch(format!(
                "image tower embeds to {} dims, text tower to {}",
                image.d_emb(),
                text.d_emb()
            )));
        }
        Ok(Self { image, text })
    }

    /// The same pair with the roles of the towers exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            image: self.text.clone(),
            text: self.image.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BimodalState {
    pub lambda_i: ThresholdState,
    pub lambda_t: ThresholdState,
    pub u_i: SurrogateState,
    pub u_t: SurrogateState,
}

impl BimodalState {
    pub fn new(n: usize, alpha: f64, lr: f64, beta1: f64, beta2: f64, gamma: f64) -> Result<Self> {
        let lambda = ThresholdState::new(n, alpha, lr, beta1, beta2)?;
        let u = SurrogateState::new(n, gamma)?;
        Ok(Self {
            lambda_i: lambda.clone(),
            lambda_t: lambda,
            u_i: u.clone(),
            u_t: u,
        })
    }

    pub fn len(&self) -> usize {
        self.lambda_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda_i.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            lambda_i: self.lambda_t.clone(),
            lambda_t: self.lambda_i.clone(),
            u_i: self.u_t.clone(),
            u_t: self.u_i.clone(),
        }
    }
}

/// A batch of aligned image/text embeddings.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub pair_ids: Vec<usize>,
    pub image: Matrix,
    pub text: Matrix,
    /// `B × B`, false on the diagonal.
    pub neg_mask: Mask,
}

impl PairBatch {
    pub fn new(pair_ids: Vec<usize>, image: Matrix, text: Matrix) -> Result<Self> {
        let b = pair_ids.len();
        if image.rows() != b || text.shape() != image.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{b} pairs with image {:?} and text {:?}",
                image.shape(),
                text.shape()
            )));
        }
        if b < 2 {
            return Err(Error::EmptyNegatives);
        }
        Ok(Self {
            pair_ids,
            image,
            text,
            neg_mask: Mask::from_fn(b, b, |i, j| i != j),
        })
    }

    pub fn size(&self) -> usize {
        self.pair_ids.len()
    }

    /// `S = Z_I Z_Tᵀ`. Rows are image anchors; its transpose has text anchors as rows.
    pub fn similarity(&self) -> Result<SimilarityBlock> {
        cosine_block(&self.image, &self.text)
    }

    fn check_sim(&self, sim: &SimilarityBlock) -> Result<()> {
        if sim.anchors() != self.size() || sim.negatives() != self.size() {
            return Err(Error::ShapeMismatch(format!(
                "cross similarity {}x{} for {} pairs",
                sim.anchors(),
                sim.negatives(),
                self.size()
            )));
        }
        Ok(())
    }
}

/// Kept negatives for one anchor direction. `keep.row(a)` is indexed by the
/// other modality's batch position.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionFilter {
    pub keep: Mask,
    pub kept_counts: Vec<usize>,
    pub predicted_fn_fraction: f64,
}

impl DirectionFilter {
    fn from_keep(keep: Mask) -> Self {
        let b = keep.rows();
        let kept_counts: Vec<usize> = (0..b).map(|i| keep.row_count(i)).collect();
        let total = b * (b - 1);
        let kept: usize = kept_counts.iter().sum();
        Self {
            keep,
            kept_counts,
            predicted_fn_fraction: 1.0 - kept as f64 / total as f64,
        }
    }

    /// Keeps off-diagonal entries of `rows` with value at most the row's threshold.
    fn by_threshold(rows: &SimilarityBlock, ids: &[usize], lambda: &ThresholdState) -> Result<Self> {
        for &id in ids {
            if id >= lambda.len() {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    len: lambda.len(),
                });
            }
        }
        let b = ids.len();
        Ok(Self::from_keep(Mask::from_fn(b, b, |a, j| {
            a != j && rows.get(a, j) <= lambda.lambda[ids[a]]
        })))
    }

    /// Drops each anchor's `k` most similar negatives, lower index first on ties.
    fn top_k(rows: &SimilarityBlock, k: usize) -> Result<Self> {
        let b = rows.anchors();
        if k > b - 1 {
            return Err(Error::KTooLarge { k, available: b - 1 });
        }
        let mut keep = Mask::from_fn(b, b, |a, j| a != j);
        for a in 0..b {
            let mut order: Vec<usize> = (0..b).filter(|&j| j != a).collect();
            order.sort_by(|&x, &y| rows.get(a, y).total_cmp(&rows.get(a, x)).then(x.cmp(&y)));
            order[..k].iter().for_each(|&j| keep.set(a, j, false));
        }
        Ok(Self::from_keep(keep))
    }

    fn unfiltered(b: usize) -> Self {
        Self::from_keep(Mask::from_fn(b, b, |a, j| a != j))
    }

    pub fn effective_row<'a>(&'a self, negs: &'a Mask, a: usize, fallback: EmptyFallback) -> Option<&'a [bool]> {
        if self.kept_counts[a] > 0 {
            Some(self.keep.row(a))
        } else {
            match fallback {
                EmptyFallback::KeepAll => Some(negs.row(a)),
                EmptyFallback::SkipAnchor => None,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BimodalFilter {
    /// Image anchors; columns are texts.
    pub image: DirectionFilter,
    /// Text anchors; columns are images.
    pub text: DirectionFilter,
}

impl BimodalFilter {
    pub fn unfiltered(batch: &PairBatch) -> Self {
        Self {
            image: DirectionFilter::unfiltered(batch.size()),
            text: DirectionFilter::unfiltered(batch.size()),
        }
    }

    /// Mean of the two directions' predicted false-negative fractions.
    pub fn predicted_fn_fraction(&self) -> f64 {
        0.5 * (self.image.predicted_fn_fraction + self.text.predicted_fn_fraction)
    }
}

pub fn bimodal_filter(batch: &PairBatch, sim: &SimilarityBlock, state: &BimodalState) -> Result<BimodalFilter> {
    batch.check_sim(sim)?;
    Ok(BimodalFilter {
        image: DirectionFilter::by_threshold(sim, &batch.pair_ids, &state.lambda_i)?,
        text: DirectionFilter::by_threshold(&sim.transpose(), &batch.pair_ids, &state.lambda_t)?,
    })
}

/// Top-k baseline in both directions.
pub fn bimodal_fnc_filter(batch: &PairBatch, sim: &SimilarityBlock, k: usize) -> Result<BimodalFilter> {
    batch.check_sim(sim)?;
    Ok(BimodalFilter {
        image: DirectionFilter::top_k(sim, k)?,
        text: DirectionFilter::top_k(&sim.transpose(), k)?,
    })
}

/// Per-direction `ĝ` for every anchor (`None` = skipped by the fallback).
/// `rows` has the direction's anchors as rows.
fn direction_g_hat(
    batch: &PairBatch,
    rows: &SimilarityBlock,
    filter: &DirectionFilter,
    cfg: &LossConfig,
) -> Result<Vec<Option<f64>>> {
    (0..batch.size())
        .map(|a| match filter.effective_row(&batch.neg_mask, a, cfg.fallback) {
            Some(keep) => g_hat(rows.row(a), keep, cfg.tau)
                .map(Some)
                .map_err(|_| Error::EmptyFilteredSet(batch.pair_ids[a])),
            None => Ok(None),
        })
        .collect()
}

/// Per-anchor `ĝ` for one direction; `None` marks an anchor skipped by the fallback.
pub type DirectionGHat = Vec<Option<f64>>;

/// `(ĝ_I, ĝ_T)` per batch position.
pub fn bimodal_g_hat(
    batch: &PairBatch,
    sim: &SimilarityBlock,
    filter: &BimodalFilter,
    cfg: &LossConfig,
) -> Result<(DirectionGHat, DirectionGHat)> {
    batch.check_sim(sim)?;
    Ok((
        direction_g_hat(batch, sim, &filter.image, cfg)?,
        direction_g_hat(batch, &sim.transpose(), &filter.text, cfg)?,
    ))
}

pub fn bimodal_loss_with_filter(
    batch: &PairBatch,
    sim: &SimilarityBlock,
    filter: &BimodalFilter,
    cfg: &LossConfig,
    full_negative_count: usize,
) -> Result<f64> {
    cfg.validate()?;
    let (gi, gt) = bimodal_g_hat(batch, sim, filter, cfg)?;
    let negs = (batch.size() - 1) as f64;
    let log_term = |g: Option<f64>, dir: &DirectionFilter, a: usize| -> f64 {
        match (g, dir.effective_row(&batch.neg_mask, a, cfg.fallback)) {
            (Some(g), Some(row)) => {
                let kept = row.iter().filter(|&&k| k).count() as f64;
                cfg.tau * (full_negative_count as f64 * kept / negs * g).ln()
            }
            _ => 0.0,
        }
    };
    let mut total = 0.0;
    for i in 0..batch.size() {
        // the two log terms are summed first so exchanging modalities is exact
        total += -2.0 * sim.get(i, i) + (log_term(gi[i], &filter.image, i) + log_term(gt[i], &filter.text, i));
    }
    Ok(total / batch.size() as f64)
}

/// Filters by both modalities' thresholds and evaluates the batch loss.
pub fn bimodal_filtered_loss(
    batch: &PairBatch,
    sim: &SimilarityBlock,
    state: &BimodalState,
    cfg: &LossConfig,
    full_negative_count: usize,
) -> Result<(f64, BimodalFilter)> {
    let filter = bimodal_filter(batch, sim, state)?;
    let loss = bimodal_loss_with_filter(batch, sim, &filter, cfg, full_negative_count)?;
    Ok((loss, filter))
}

/// `∂/∂S` of the estimator `(1/B) Σᵢ [−2 S_ii + (τ/u_I,i) ĝ_I,i + (τ/u_T,i) ĝ_T,i]`
/// with the surrogates held constant.
pub fn similarity_coefficients(
    batch: &PairBatch,
    sim: &SimilarityBlock,
    filter: &BimodalFilter,
    state: &BimodalState,
    cfg: &LossConfig,
) -> Result<Matrix> {
    batch.check_sim(sim)?;
    let b = batch.size();
    let inv_b = 1.0 / b as f64;
    let mut c = Matrix::zeros(b, b);
    for i in 0..b {
        c[(i, i)] = -2.0 * inv_b;
    }
    for a in 0..b {
        let id = batch.pair_ids[a];
        if let Some(row) = filter.image.effective_row(&batch.neg_mask, a, cfg.fallback) {
            let u = state.u_i.get(id).ok_or(Error::UninitializedSurrogate(id))?;
            let scale = inv_b / (u * row.iter().filter(|&&k| k).count() as f64);
            for (j, _) in row.iter().enumerate().filter(|(_, &k)| k) {
                c[(a, j)] += scale * (sim.get(a, j) / cfg.tau).exp();
            }
        }
        if let Some(col) = filter.text.effective_row(&batch.neg_mask, a, cfg.fallback) {
            let u = state.u_t.get(id).ok_or(Error::UninitializedSurrogate(id))?;
            let scale = inv_b / (u * col.iter().filter(|&&k| k).count() as f64);
            for (i, _) in col.iter().enumerate().filter(|(_, &k)| k) {
                c[(i, a)] += scale * (sim.get(i, a) / cfg.tau).exp();
            }
        }
    }
    Ok(c)
}

/// Gradients with respect to the image and text embeddings:
/// `dZ_I = C Z_T`, `dZ_T = Cᵀ Z_I`.
pub fn bimodal_embedding_grads(
    batch: &PairBatch,
    sim: &SimilarityBlock,
    filter: &BimodalFilter,
    state: &BimodalState,
    cfg: &LossConfig,
) -> Result<(Matrix, Matrix)> {
    let c = similarity_coefficients(batch, sim, filter, state, cfg)?;
    Ok((c.matmul(&batch.text)?, c.t_matmul(&batch.image)?))
}

#[allow(clippy::too_many_arguments)]
pub fn bimodal_grad_estimator(
    towers: &TowerPair,
    batch: &PairBatch,
    sim: &SimilarityBlock,
    filter: &BimodalFilter,
    state: &BimodalState,
    cfg: &LossConfig,
    tape_image: &ForwardTape,
    tape_text: &ForwardTape,
) -> Result<(EncoderGrads, EncoderGrads)> {
    let (gi, gt) = bimodal_embedding_grads(batch, sim, filter, state, cfg)?;
    Ok((
        backward(&towers.image, tape_image, &gi)?,
        backward(&towers.text, tape_text, &gt)?,
    ))
}

/// Switches for one bimodal step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BimodalStepOptions {
    pub loss: LossConfig,
    pub lambda_mode: LambdaOptimizer,
    pub update_lambda: bool,
    pub filter: bool,
    pub full_negative_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BimodalStepOutput {
    pub loss: f64,
    pub image_grads: EncoderGrads,
    pub text_grads: EncoderGrads,
    pub filter: BimodalFilter,
}

/// One step on a batch of raw (already augmented) inputs: λ updates, then
/// filtering, then surrogate updates, then the gradient estimate. The caller
/// applies the parameter update.
pub fn bimodal_step(
    towers: &TowerPair,
    state: &mut BimodalState,
    pair_ids: &[usize],
    image_inputs: &Matrix,
    text_inputs: &Matrix,
    opts: &BimodalStepOptions,
) -> Result<BimodalStepOutput> {
    opts.loss.validate()?;
    let tape_i = forward(&towers.image, image_inputs)?;
    let tape_t = forward(&towers.text, text_inputs)?;
    let batch = PairBatch::new(
        pair_ids.to_vec(),
        tape_i.embeddings().clone(),
        tape_t.embeddings().clone(),
    )?;
    let sim = batch.similarity()?;
    if opts.update_lambda {
        state
            .lambda_i
            .update_masked(pair_ids, &sim, &batch.neg_mask, opts.lambda_mode)?;
        state
            .lambda_t
            .update_masked(pair_ids, &sim.transpose(), &batch.neg_mask, opts.lambda_mode)?;
    }
    let filter = if opts.filter {
        bimodal_filter(&batch, &sim, state)?
    } else {
        BimodalFilter::unfiltered(&batch)
    };
    let (gi, gt) = bimodal_g_hat(&batch, &sim, &filter, &opts.loss)?;
    state.u_i.update_present(pair_ids, &gi)?;
    state.u_t.update_present(pair_ids, &gt)?;
    let loss = bimodal_loss_with_filter(&batch, &sim, &filter, &opts.loss, opts.full_negative_count)?;
    let (image_grads, text_grads) =
        bimodal_grad_estimator(towers, &batch, &sim, &filter, state, &opts.loss, &tape_i, &tape_t)?;
    Ok(BimodalStepOutput {
        loss,
        image_grads,
        text_grads,
        filter,
    })
}
