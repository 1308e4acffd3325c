//! Training loops. Each step runs, in order: threshold update, filtering,
//! surrogate update, gradient estimate, parameter update.

use serde::{Deserialize, Serialize};

use crate::bimodal::{
    bimodal_filter, bimodal_fnc_filter, bimodal_g_hat, bimodal_grad_estimator, bimodal_loss_with_filter, BimodalFilter,
    BimodalState, PairBatch, TowerPair,
};
use crate::contrastive::{
    batch_g_hat, fnc_filter, grad_estimator, loss_with_filter, threshold_filter, BatchView, FilterResult, LossConfig,
    SurrogateState,
};
use crate::encoder::{forward, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::Confusion;
use crate::optim::{cosine_lr, Adam};
use crate::seeding::{self, epoch_batches, STREAM_AUGMENT, STREAM_INIT, STREAM_TEXT};
use crate::synthdata::{augment, AugmentationOp, PairedDataset, SyntheticDataset};
use crate::threshold::{quantile_rank, LambdaOptimizer, ThresholdState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    None,
    Glofnd,
    Fnc,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "glofnd" => Ok(Self::Glofnd),
            "fnc" => Ok(Self::Fnc),
            other => Err(Error::BadConfig(format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Glofnd => "glofnd",
            Self::Fnc => "fnc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d_hid: usize,
    pub d_emb: usize,
    pub loss: LossConfig,
    pub lambda_mode: LambdaOptimizer,
    pub lambda_lr: f64,
    pub lambda_beta1: f64,
    pub lambda_beta2: f64,
    pub lr: f64,
    pub w_beta1: f64,
    pub w_beta2: f64,
    pub cosine_decay: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epoch: usize,
    pub method: Method,
    /// Track thresholds before filtering starts.
    pub lambda_during_warmup: bool,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_hid: 32,
            d_emb: 16,
            loss: LossConfig {
                tau: 0.1,
                gamma: 0.9,
                alpha: 0.01,
                fallback: Default::default(),
            },
            lambda_mode: LambdaOptimizer::Adam,
            lambda_lr: 0.05,
            lambda_beta1: 0.9,
            lambda_beta2: 0.98,
            lr: 1e-3,
            w_beta1: 0.9,
            w_beta2: 0.999,
            cosine_decay: false,
            epochs: 100,
            batch_size: 64,
            warmup_epoch: 30,
            method: Method::Glofnd,
            lambda_during_warmup: false,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::BadConfig("batch_size must be at least 2".into()));
        }
        if self.warmup_epoch > self.epochs {
            return Err(Error::BadConfig(format!(
                "warmup_epoch {} exceeds epochs {}",
                self.warmup_epoch, self.epochs
            )));
        }
        if self.d_hid == 0 || self.d_emb == 0 {
            return Err(Error::BadConfig("encoder dimensions must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::BadConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::BadConfig(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    fn filtering(&self, epoch: usize) -> bool {
        self.method != Method::None && epoch >= self.warmup_epoch
    }

    fn learning_lambda(&self, epoch: usize) -> bool {
        self.method == Method::Glofnd && (epoch >= self.warmup_epoch || self.lambda_during_warmup)
    }

    fn total_steps(&self, n: usize) -> usize {
        self.epochs * epoch_batches_len(n, self.batch_size)
    }
}

fn epoch_batches_len(n: usize, batch_size: usize) -> usize {
    n / batch_size + usize::from(n % batch_size >= 2)
}

/// `k = ⌈α·m⌉` for the top-k baseline over `m` negatives (0 when `α = 0`).
pub fn fnc_k(alpha: f64, negatives: usize) -> usize {
    if alpha == 0.0 {
        0
    } else {
        quantile_rank(alpha, negatives).0
    }
}

/// One row of the per-step metric stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub predicted_fn_fraction: f64,
    pub lambda_mean: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kept_mean: f64,
}

/// Per-epoch aggregates, written as JSON lines alongside the step stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_mean: f64,
    pub predicted_fn_fraction: f64,
    pub fn_precision: f64,
    pub fn_recall: f64,
    pub fn_f1: f64,
    pub lambda_mean: f64,
}

pub(crate) fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len().max(1) as f64;
    let (sum, lo, hi) = values
        .iter()
        .fold((0.0, f64::INFINITY, f64::NEG_INFINITY), |(s, lo, hi), &v| {
            (s + v, lo.min(v), hi.max(v))
        });
    (sum / n, lo, hi)
}

/// Aggregates step rows of one epoch together with its confusion counts.
#[derive(Debug, Default)]
struct EpochAccumulator {
    loss: f64,
    fn_fraction: f64,
    steps: usize,
    confusion: Confusion,
}

impl EpochAccumulator {
    fn push(&mut self, loss: f64, fn_fraction: f64) {
        self.loss += loss;
        self.fn_fraction += fn_fraction;
        self.steps += 1;
    }

    fn finish(&self, epoch: usize, lambda_mean: f64) -> EpochMetrics {
        let n = self.steps.max(1) as f64;
        let s = self.confusion.scores();
        EpochMetrics {
            epoch,
            loss_mean: self.loss / n,
            predicted_fn_fraction: self.fn_fraction / n,
            fn_precision: s.precision,
            fn_recall: s.recall,
            fn_f1: s.f1,
            lambda_mean,
        }
    }
}

/// Unimodal trainer over a labeled synthetic dataset.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub dataset: SyntheticDataset,
    pub params: EncoderParams,
    pub optimizer: Adam,
    pub thresholds: ThresholdState,
    pub surrogates: SurrogateState,
    pub augmentation: AugmentationOp,
    step: usize,
    last_confusion: Confusion,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: SyntheticDataset) -> Result<Self> {
        config.validate()?;
        if dataset.len() < 2 {
            return Err(Error::EmptyNegatives);
        }
        let mut rng = seeding::stream(config.seed, &[STREAM_INIT]);
        let params = EncoderParams::init(dataset.dim(), config.d_hid, config.d_emb, &mut rng);
        let augmentation =
            AugmentationOp::new(config.noise_sigma, seeding::derive_seed(config.seed, &[STREAM_AUGMENT]))?;
        Self::with_parts(config, dataset, params, augmentation)
    }

    pub fn with_parts(
        config: TrainConfig,
        dataset: SyntheticDataset,
        params: EncoderParams,
        augmentation: AugmentationOp,
    ) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        if params.d_in() != dataset.dim() {
            return Err(Error::DimMismatch(format!(
                "encoder expects {} inputs, dataset has {}",
                params.d_in(),
                dataset.dim()
            )));
        }
        let n = dataset.len();
        Ok(Self {
            optimizer: Adam::new(params.num_params(), config.lr, config.w_beta1, config.w_beta2),
            thresholds: ThresholdState::new(
                n,
                config.loss.alpha,
                config.lambda_lr,
                config.lambda_beta1,
                config.lambda_beta2,
            )?,
            surrogates: SurrogateState::new(n, config.loss.gamma)?,
            config,
            dataset,
            params,
            augmentation,
            step: 0,
            last_confusion: Confusion::default(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Size of each anchor's global negative set (both views of every other sample).
    pub fn full_negative_count(&self) -> usize {
        2 * (self.dataset.len() - 1)
    }

    /// Confusion counts of predicted vs. true false negatives in the last full epoch.
    pub fn last_epoch_confusion(&self) -> Confusion {
        self.last_confusion
    }

    fn lr_at(&self) -> f64 {
        if self.config.cosine_decay {
            let total = self.config.total_steps(self.dataset.len()).max(1);
            cosine_lr(self.config.lr, self.step as f64 / total as f64)
        } else {
            self.config.lr
        }
    }

    /// One training step on the given anchors.
    pub fn train_step(
        &mut self,
        ids: &[usize],
        epoch: usize,
        confusion: Option<&mut Confusion>,
    ) -> Result<StepMetrics> {
        let cfg = self.config;
        let xa = augment(&self.augmentation, &self.dataset, ids, 0, epoch as u64)?;
        let xb = augment(&self.augmentation, &self.dataset, ids, 1, epoch as u64)?;
        let tape_a = forward(&self.params, &xa)?;
        let tape_b = forward(&self.params, &xb)?;
        let batch = BatchView::new(ids.to_vec(), tape_a.embeddings().clone(), tape_b.embeddings().clone())?;
        let sim = batch.similarity()?;

        if cfg.learning_lambda(epoch) {
            self.thresholds
                .update_masked(ids, &sim, &batch.neg_mask, cfg.lambda_mode)?;
        }
        let filter = if cfg.filtering(epoch) {
            match cfg.method {
                Method::Glofnd => threshold_filter(&batch, &sim, &self.thresholds)?,
                Method::Fnc => fnc_filter(&batch, &sim, fnc_k(cfg.loss.alpha, batch.negatives_per_anchor()))?,
                Method::None => FilterResult::unfiltered(&batch),
            }
        } else {
            FilterResult::unfiltered(&batch)
        };
        let ghat = batch_g_hat(&batch, &sim, &filter, &cfg.loss)?;
        self.surrogates.update_present(ids, &ghat)?;
        let loss = loss_with_filter(&batch, &sim, &filter, &cfg.loss, self.full_negative_count())?;
        let grads = grad_estimator(
            &self.params,
            &batch,
            &sim,
            &filter,
            &self.surrogates,
            &cfg.loss,
            &tape_a,
            &tape_b,
        )?;

        let lr = self.lr_at();
        let mut flat = self.params.to_flat();
        self.optimizer.step(&mut flat, &grads.to_flat(), lr);
        self.params.set_flat(&flat)?;

        if let Some(c) = confusion {
            let predicted = filter.predicted_fn_mask(&batch);
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..2 * ids.len() {
                    if batch.neg_mask.get(i, j) {
                        let truth = self.dataset.labels[batch.column_sample(j)] == self.dataset.labels[id];
                        c.record(predicted.get(i, j), truth);
                    }
                }
            }
        }

        let (lambda_mean, lambda_min, lambda_max) = summarize(&self.thresholds.lambda);
        let kept_mean = filter.kept_counts.iter().sum::<usize>() as f64 / ids.len() as f64;
        let m = StepMetrics {
            epoch,
            step: self.step,
            loss,
            predicted_fn_fraction: filter.predicted_fn_fraction,
            lambda_mean,
            lambda_min,
            lambda_max,
            kept_mean,
        };
        self.step += 1;
        Ok(m)
    }

    pub fn run_epoch(
        &mut self,
        epoch: usize,
        mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
    ) -> Result<EpochMetrics> {
        let mut acc = EpochAccumulator::default();
        for ids in epoch_batches(
            self.dataset.len(),
            self.config.batch_size,
            self.config.seed,
            epoch as u64,
        ) {
            let mut conf = Confusion::default();
            let m = self.train_step(&ids, epoch, Some(&mut conf))?;
            acc.confusion.merge(&conf);
            acc.push(m.loss, m.predicted_fn_fraction);
            on_step(&m)?;
        }
        self.last_confusion = acc.confusion;
        Ok(acc.finish(epoch, summarize(&self.thresholds.lambda).0))
    }

    /// Runs every configured epoch; returns the per-epoch aggregates.
    pub fn fit(&mut self, mut on_step: impl FnMut(&StepMetrics) -> Result<()>) -> Result<Vec<EpochMetrics>> {
        (0..self.config.epochs)
            .map(|e| self.run_epoch(e, &mut on_step))
            .collect()
    }
}

/// Step row of the two-tower stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BimodalStepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub predicted_fn_fraction: f64,
    #[serde(rename = "lambda_I_mean")]
    pub lambda_i_mean: f64,
    #[serde(rename = "lambda_I_min")]
    pub lambda_i_min: f64,
    #[serde(rename = "lambda_I_max")]
    pub lambda_i_max: f64,
    #[serde(rename = "lambda_T_mean")]
    pub lambda_t_mean: f64,
    #[serde(rename = "lambda_T_min")]
    pub lambda_t_min: f64,
    #[serde(rename = "lambda_T_max")]
    pub lambda_t_max: f64,
    pub kept_mean: f64,
}

/// Two-tower trainer. Each modality gets one augmented view per step.
#[derive(Debug, Clone)]
pub struct BimodalTrainer {
    pub config: TrainConfig,
    pub data: PairedDataset,
    pub towers: TowerPair,
    pub image_optimizer: Adam,
    pub text_optimizer: Adam,
    pub state: BimodalState,
    pub image_augmentation: AugmentationOp,
    pub text_augmentation: AugmentationOp,
    step: usize,
    last_confusion: Confusion,
}

impl BimodalTrainer {
    pub fn new(config: TrainConfig, data: PairedDataset) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::stream(config.seed, &[STREAM_INIT]);
        let image = EncoderParams::init(data.image.dim(), config.d_hid, config.d_emb, &mut rng);
        let mut rng = seeding::stream(config.seed, &[STREAM_INIT, STREAM_TEXT]);
        let text = EncoderParams::init(data.text.dim(), config.d_hid, config.d_emb, &mut rng);
        let aug = seeding::derive_seed(config.seed, &[STREAM_AUGMENT]);
        Self::with_parts(
            config,
            data,
            TowerPair::new(image, text)?,
            AugmentationOp::new(config.noise_sigma, aug)?,
            AugmentationOp::new(config.noise_sigma, seeding::derive_seed(aug, &[STREAM_TEXT]))?,
        )
    }

    pub fn with_parts(
        config: TrainConfig,
        data: PairedDataset,
        towers: TowerPair,
        image_augmentation: AugmentationOp,
        text_augmentation: AugmentationOp,
    ) -> Result<Self> {
        config.validate()?;
        if towers.image.d_in() != data.image.dim() || towers.text.d_in() != data.text.dim() {
            return Err(Error::DimMismatch("tower input sizes do not match the data".into()));
        }
        if data.len() < 2 {
            return Err(Error::EmptyNegatives);
        }
        let c = config;
        Ok(Self {
            image_optimizer: Adam::new(towers.image.num_params(), c.lr, c.w_beta1, c.w_beta2),
            text_optimizer: Adam::new(towers.text.num_params(), c.lr, c.w_beta1, c.w_beta2),
            state: BimodalState::new(
                data.len(),
                c.loss.alpha,
                c.lambda_lr,
                c.lambda_beta1,
                c.lambda_beta2,
                c.loss.gamma,
            )?,
            config,
            data,
            towers,
            image_augmentation,
            text_augmentation,
            step: 0,
            last_confusion: Confusion::default(),
        })
    }

    pub fn last_epoch_confusion(&self) -> Confusion {
        self.last_confusion
    }

    pub fn train_step(
        &mut self,
        ids: &[usize],
        epoch: usize,
        confusion: Option<&mut Confusion>,
    ) -> Result<BimodalStepMetrics> {
        let cfg = self.config;
        let e = epoch as u64;
        let xi = augment(&self.image_augmentation, &self.data.image, ids, 0, e)?;
        let xt = augment(&self.text_augmentation, &self.data.text, ids, 0, e)?;
        let tape_i = forward(&self.towers.image, &xi)?;
        let tape_t = forward(&self.towers.text, &xt)?;
        let batch = PairBatch::new(ids.to_vec(), tape_i.embeddings().clone(), tape_t.embeddings().clone())?;
        let sim = batch.similarity()?;

        if cfg.learning_lambda(epoch) {
            self.state
                .lambda_i
                .update_masked(ids, &sim, &batch.neg_mask, cfg.lambda_mode)?;
            self.state
                .lambda_t
                .update_masked(ids, &sim.transpose(), &batch.neg_mask, cfg.lambda_mode)?;
        }
        let filter = if cfg.filtering(epoch) {
            match cfg.method {
                Method::Glofnd => bimodal_filter(&batch, &sim, &self.state)?,
                Method::Fnc => bimodal_fnc_filter(&batch, &sim, fnc_k(cfg.loss.alpha, ids.len() - 1))?,
                Method::None => BimodalFilter::unfiltered(&batch),
            }
        } else {
            BimodalFilter::unfiltered(&batch)
        };
        let (gi, gt) = bimodal_g_hat(&batch, &sim, &filter, &cfg.loss)?;
        self.state.u_i.update_present(ids, &gi)?;
        self.state.u_t.update_present(ids, &gt)?;
        let loss = bimodal_loss_with_filter(&batch, &sim, &filter, &cfg.loss, self.data.len() - 1)?;
        let (g_img, g_txt) = bimodal_grad_estimator(
            &self.towers,
            &batch,
            &sim,
            &filter,
            &self.state,
            &cfg.loss,
            &tape_i,
            &tape_t,
        )?;

        let lr = if cfg.cosine_decay {
            let total = cfg.total_steps(self.data.len()).max(1);
            cosine_lr(cfg.lr, self.step as f64 / total as f64)
        } else {
            cfg.lr
        };
        let mut flat = self.towers.image.to_flat();
        self.image_optimizer.step(&mut flat, &g_img.to_flat(), lr);
        self.towers.image.set_flat(&flat)?;
        let mut flat = self.towers.text.to_flat();
        self.text_optimizer.step(&mut flat, &g_txt.to_flat(), lr);
        self.towers.text.set_flat(&flat)?;

        if let Some(c) = confusion {
            let labels = self.data.labels();
            for dir in [&filter.image, &filter.text] {
                for a in 0..ids.len() {
                    for j in (0..ids.len()).filter(|&j| j != a) {
                        c.record(!dir.keep.get(a, j), labels[ids[a]] == labels[ids[j]]);
                    }
                }
            }
        }

        let (im, ilo, ihi) = summarize(&self.state.lambda_i.lambda);
        let (tm, tlo, thi) = summarize(&self.state.lambda_t.lambda);
        let kept: usize = filter.image.kept_counts.iter().chain(&filter.text.kept_counts).sum();
        let m = BimodalStepMetrics {
            epoch,
            step: self.step,
            loss,
            predicted_fn_fraction: filter.predicted_fn_fraction(),
            lambda_i_mean: im,
            lambda_i_min: ilo,
            lambda_i_max: ihi,
            lambda_t_mean: tm,
            lambda_t_min: tlo,
            lambda_t_max: thi,
            kept_mean: kept as f64 / (2 * ids.len()) as f64,
        };
        self.step += 1;
        Ok(m)
    }

    pub fn run_epoch(
        &mut self,
        epoch: usize,
        mut on_step: impl FnMut(&BimodalStepMetrics) -> Result<()>,
    ) -> Result<EpochMetrics> {
        let mut acc = EpochAccumulator::default();
        for ids in epoch_batches(self.data.len(), self.config.batch_size, self.config.seed, epoch as u64) {
            let mut conf = Confusion::default();
            let m = self.train_step(&ids, epoch, Some(&mut conf))?;
            acc.confusion.merge(&conf);
            acc.push(m.loss, m.predicted_fn_fraction);
            on_step(&m)?;
        }
        self.last_confusion = acc.confusion;
        let lm = 0.5 * (summarize(&self.state.lambda_i.lambda).0 + summarize(&self.state.lambda_t.lambda).0);
        Ok(acc.finish(epoch, lm))
    }

    pub fn fit(&mut self, mut on_step: impl FnMut(&BimodalStepMetrics) -> Result<()>) -> Result<Vec<EpochMetrics>> {
        (0..self.config.epochs)
            .map(|e| self.run_epoch(e, &mut on_step))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::EmptyFallback;
    use crate::synthdata::{make_gaussian_mixture, make_paired_mixture};

    fn small_config(method: Method) -> TrainConfig {
        TrainConfig {
            d_hid: 8,
            d_emb: 4,
            loss: LossConfig {
                tau: 0.2,
                gamma: 0.9,
                alpha: 0.1,
                fallback: EmptyFallback::KeepAll,
            },
            epochs: 4,
            batch_size: 8,
            warmup_epoch: 1,
            method,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    fn rows(t: &mut Trainer) -> Vec<StepMetrics> {
        let mut out = Vec::new();
        t.fit(|m| {
            out.push(*m);
            Ok(())
        })
        .unwrap();
        out
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(Method::Glofnd);
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = small_config(Method::Glofnd);
        c.warmup_epoch = 5;
        assert!(c.validate().is_err());
        assert_eq!("fnc".parse::<Method>().unwrap(), Method::Fnc);
        assert!("top".parse::<Method>().is_err());
    }

    #[test]
    fn fnc_k_rounds_up() {
        assert_eq!(fnc_k(0.0, 10), 0);
        assert_eq!(fnc_k(0.01, 126), 2);
        assert_eq!(fnc_k(0.5, 10), 5);
    }

    #[test]
    fn warmup_covering_all_epochs_matches_no_filtering() {
        let ds = make_gaussian_mixture(3, 10, 5, 0.3, 1).unwrap();
        let mut c = small_config(Method::Glofnd);
        c.warmup_epoch = c.epochs;
        let a = rows(&mut Trainer::new(c, ds.clone()).unwrap());
        c.method = Method::None;
        let b = rows(&mut Trainer::new(c, ds).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn identical_seeds_reproduce() {
        let ds = make_gaussian_mixture(3, 10, 5, 0.3, 1).unwrap();
        let c = small_config(Method::Glofnd);
        let mut t1 = Trainer::new(c, ds.clone()).unwrap();
        let mut t2 = Trainer::new(c, ds).unwrap();
        assert_eq!(rows(&mut t1), rows(&mut t2));
        assert_eq!(t1.params, t2.params);
        assert_eq!(t1.thresholds, t2.thresholds);
    }

    #[test]
    fn filtering_starts_after_warmup() {
        let ds = make_gaussian_mixture(3, 10, 5, 0.3, 1).unwrap();
        let mut t = Trainer::new(small_config(Method::Glofnd), ds).unwrap();
        let r = rows(&mut t);
        assert!(r
            .iter()
            .filter(|m| m.epoch == 0)
            .all(|m| m.predicted_fn_fraction == 0.0 && m.lambda_max == 1.0));
        assert!(r.iter().any(|m| m.lambda_min < 1.0));
        assert!(t.thresholds.step_count.iter().all(|&c| c == 3));
    }

    #[test]
    fn lambda_can_track_during_warmup() {
        let ds = make_gaussian_mixture(3, 10, 5, 0.3, 1).unwrap();
        let mut c = small_config(Method::Glofnd);
        c.lambda_during_warmup = true;
        let mut t = Trainer::new(c, ds).unwrap();
        let r = rows(&mut t);
        let first = &r[0];
        assert_eq!(first.predicted_fn_fraction, 0.0);
        assert!(first.lambda_min < 1.0);
    }

    #[test]
    fn fnc_removes_fixed_fraction() {
        let ds = make_gaussian_mixture(3, 8, 5, 0.3, 1).unwrap();
        let mut t = Trainer::new(small_config(Method::Fnc), ds).unwrap();
        let r = rows(&mut t);
        // batches of 8 → 14 negatives, k = ⌈1.4⌉ = 2
        for m in r.iter().filter(|m| m.epoch >= 1) {
            assert!((m.predicted_fn_fraction - 2.0 / 14.0).abs() < 1e-12);
            assert_eq!(m.kept_mean, 12.0);
        }
    }

    #[test]
    fn disjoint_batches_leave_other_entries_alone() {
        let ds = make_gaussian_mixture(2, 8, 4, 0.3, 2).unwrap();
        let mut c = small_config(Method::Glofnd);
        c.warmup_epoch = 0;
        let mut t = Trainer::new(c, ds).unwrap();
        t.train_step(&[0, 1, 2, 3], 0, None).unwrap();
        let (l, u) = (t.thresholds.clone(), t.surrogates.clone());
        t.train_step(&[4, 5, 6, 7], 0, None).unwrap();
        assert_eq!(t.thresholds.lambda[..4], l.lambda[..4]);
        assert_eq!(t.surrogates.u[..4], u.u[..4]);
        assert_eq!(t.thresholds.lambda[8..], l.lambda[8..]);
        assert!(t.surrogates.get(8).is_none());
    }

    #[test]
    fn bimodal_trainer_runs_and_reproduces() {
        let data = make_paired_mixture(3, 6, 4, 3, 0.3, 2).unwrap();
        let c = small_config(Method::Glofnd);
        let run = |data: PairedDataset| {
            let mut t = BimodalTrainer::new(c, data).unwrap();
            let mut out = Vec::new();
            t.fit(|m| {
                out.push(*m);
                Ok(())
            })
            .unwrap();
            (out, t.state)
        };
        let (a, sa) = run(data.clone());
        let (b, sb) = run(data);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(a.iter().all(|m| m.loss.is_finite()));
        assert!(sa.lambda_i.lambda.iter().any(|&l| l < 1.0));
    }
}
