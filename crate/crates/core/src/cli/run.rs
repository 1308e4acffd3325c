//! Experiment entry points behind the command-line subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Modality, RunConfig};
use super::plot::line_chart;
use crate::encoder::{forward, EncoderParams};
use crate::error::{Error, Result};
use crate::frozen::{exact_solutions, fit_thresholds, predicted_fn_fraction, StreamingFit};
use crate::metrics::{
    approx_optimal_lambda, approx_optimal_lambda_embedded, threshold_error, Confusion, SummaryReport, ThresholdError,
    EVAL_EPOCH,
};
use crate::numkit::{dot, Matrix};
use crate::seeding::{self, STREAM_INIT};
use crate::synthdata::{augment, make_gaussian_mixture, make_paired_mixture, AugmentationOp, SyntheticDataset};
use crate::threshold::ThresholdState;
use crate::train::{BimodalTrainer, EpochMetrics, Method, Trainer};

/// Machine-readable outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub method: Method,
    pub alpha: f64,
    pub seed: u64,
    pub epochs: usize,
    pub true_fn_rate: f64,
    pub final_loss: f64,
    pub summary: SummaryReport,
    pub output_dir: PathBuf,
}

pub fn build_dataset(cfg: &RunConfig) -> Result<SyntheticDataset> {
    match &cfg.data_csv {
        Some(path) => SyntheticDataset::load_csv(path),
        None => make_gaussian_mixture(cfg.n_classes, cfg.per_class, cfg.d_in, cfg.spread, cfg.train.seed),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn write_plots(dir: &Path, series: &[(&str, Vec<f64>)]) -> Result<()> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    for (name, ys) in series {
        fs::write(plots.join(format!("{name}.svg")), line_chart(name, ys))?;
    }
    Ok(())
}

/// Optimal thresholds for `α`, taking the trivial answer 1 when `α = 0`.
fn reference_or_one(alpha: f64, n: usize, compute: impl FnOnce() -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    if alpha == 0.0 {
        Ok(vec![1.0; n])
    } else {
        compute()
    }
}

/// Trains per the config and writes every artifact into `cfg.output_dir`:
/// `metrics.csv`, `epoch_metrics.json`, `config.txt`, the encoder and
/// threshold checkpoints, `report.json`, and optionally `plots/*.svg`.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.txt"), cfg.to_kv_string())?;
    match cfg.mode {
        Modality::Unimodal => run_unimodal(cfg),
        Modality::Bimodal => run_bimodal(cfg),
    }
}

fn run_unimodal(cfg: &RunConfig) -> Result<RunReport> {
    let dir = &cfg.output_dir;
    let ds = build_dataset(cfg)?;
    let tc = cfg.resolved_train(ds.true_fn_rate());
    let mut trainer = Trainer::new(tc, ds)?;

    let mut csv = csv::Writer::from_path(dir.join("metrics.csv"))?;
    let mut series: Vec<[f64; 3]> = Vec::new();
    let epochs = trainer.fit(|m| {
        series.push([m.loss, m.predicted_fn_fraction, m.lambda_mean]);
        csv.serialize(m)?;
        Ok(())
    })?;
    csv.flush()?;
    write_json(&dir.join("epoch_metrics.json"), &epochs)?;
    fs::write(dir.join("encoder.json"), trainer.params.to_json()?)?;
    fs::write(dir.join("thresholds.json"), trainer.thresholds.to_json()?)?;
    write_json(&dir.join("surrogates.json"), &trainer.surrogates)?;

    let n = trainer.dataset.len();
    let all: Vec<usize> = (0..n).collect();
    let reference = reference_or_one(tc.loss.alpha, n, || {
        approx_optimal_lambda(
            &trainer.params,
            &trainer.dataset,
            &trainer.augmentation,
            &all,
            tc.loss.alpha,
            cfg.eval_sample_count,
            tc.seed,
        )
    })?;
    let err = threshold_error(&trainer.thresholds.lambda, &reference)?;
    let report = finish_report(
        cfg,
        tc.loss.alpha,
        trainer.dataset.true_fn_rate(),
        &epochs,
        trainer.last_epoch_confusion(),
        err,
    )?;
    if cfg.plots {
        write_plots(dir, &plot_series(&series))?;
    }
    Ok(report)
}

fn plot_series(rows: &[[f64; 3]]) -> Vec<(&'static str, Vec<f64>)> {
    ["loss", "predicted_fn_fraction", "lambda_mean"]
        .into_iter()
        .enumerate()
        .map(|(k, name)| (name, rows.iter().map(|r| r[k]).collect()))
        .collect()
}

fn finish_report(
    cfg: &RunConfig,
    alpha: f64,
    true_fn_rate: f64,
    epochs: &[EpochMetrics],
    confusion: Confusion,
    err: ThresholdError,
) -> Result<RunReport> {
    let last = epochs.last().copied();
    let summary = SummaryReport::new(&confusion.scores(), &err, last.map_or(0.0, |e| e.predicted_fn_fraction));
    let report = RunReport {
        mode: cfg.mode.to_string(),
        method: cfg.train.method,
        alpha,
        seed: cfg.train.seed,
        epochs: cfg.train.epochs,
        true_fn_rate,
        final_loss: last.map_or(f64::NAN, |e| e.loss_mean),
        summary,
        output_dir: cfg.output_dir.clone(),
    };
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    Ok(report)
}

fn run_bimodal(cfg: &RunConfig) -> Result<RunReport> {
    let dir = &cfg.output_dir;
    let data = make_paired_mixture(
        cfg.n_classes,
        cfg.per_class,
        cfg.d_in,
        cfg.d_text,
        cfg.spread,
        cfg.train.seed,
    )?;
    let true_rate = data.image.true_fn_rate();
    let tc = cfg.resolved_train(true_rate);
    let mut trainer = BimodalTrainer::new(tc, data)?;

    let mut csv = csv::Writer::from_path(dir.join("metrics.csv"))?;
    let mut series: Vec<[f64; 3]> = Vec::new();
    let epochs = trainer.fit(|m| {
        series.push([
            m.loss,
            m.predicted_fn_fraction,
            0.5 * (m.lambda_i_mean + m.lambda_t_mean),
        ]);
        csv.serialize(m)?;
        Ok(())
    })?;
    csv.flush()?;
    write_json(&dir.join("epoch_metrics.json"), &epochs)?;
    fs::write(dir.join("image_encoder.json"), trainer.towers.image.to_json()?)?;
    fs::write(dir.join("text_encoder.json"), trainer.towers.text.to_json()?)?;
    fs::write(dir.join("thresholds_image.json"), trainer.state.lambda_i.to_json()?)?;
    fs::write(dir.join("thresholds_text.json"), trainer.state.lambda_t.to_json()?)?;

    let n = trainer.data.len();
    let all: Vec<usize> = (0..n).collect();
    let zi = forward(
        &trainer.towers.image,
        &augment(&trainer.image_augmentation, &trainer.data.image, &all, 0, EVAL_EPOCH)?,
    )?
    .into_embeddings();
    let zt = forward(
        &trainer.towers.text,
        &augment(&trainer.text_augmentation, &trainer.data.text, &all, 0, EVAL_EPOCH)?,
    )?
    .into_embeddings();
    let a = tc.loss.alpha;
    let k = cfg.eval_sample_count;
    let ref_i = reference_or_one(a, n, || {
        approx_optimal_lambda_embedded(&zi, &[&zt], &all, a, k, tc.seed)
    })?;
    let ref_t = reference_or_one(a, n, || {
        approx_optimal_lambda_embedded(&zt, &[&zi], &all, a, k, tc.seed)
    })?;
    let learned: Vec<f64> = trainer
        .state
        .lambda_i
        .lambda
        .iter()
        .chain(&trainer.state.lambda_t.lambda)
        .copied()
        .collect();
    let reference: Vec<f64> = ref_i.into_iter().chain(ref_t).collect();
    let err = threshold_error(&learned, &reference)?;
    let report = finish_report(cfg, a, true_rate, &epochs, trainer.last_epoch_confusion(), err)?;
    if cfg.plots {
        write_plots(dir, &plot_series(&series))?;
    }
    Ok(report)
}

/// Streaming thresholds on frozen embeddings compared with the exact optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub alpha: f64,
    pub n: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_mode: crate::threshold::LambdaOptimizer,
    pub tolerance: f64,
    /// Anchors whose threshold lies within `tolerance` of the exact interval.
    pub within_tolerance: f64,
    pub lambda_mae: f64,
    pub lambda_rmse: f64,
    pub predicted_fn_fraction: f64,
}

fn frozen_encoder(cfg: &RunConfig, d_in: usize) -> Result<EncoderParams> {
    match &cfg.checkpoint {
        Some(path) => {
            let p = EncoderParams::from_json(&fs::read_to_string(path)?)?;
            if p.d_in() != d_in {
                return Err(Error::DimMismatch(format!(
                    "checkpoint expects {} inputs, dataset has {d_in}",
                    p.d_in()
                )));
            }
            Ok(p)
        }
        None => {
            let mut rng = seeding::stream(cfg.train.seed, &[STREAM_INIT]);
            Ok(EncoderParams::init(d_in, cfg.train.d_hid, cfg.train.d_emb, &mut rng))
        }
    }
}

/// Fits thresholds against the frozen embeddings of the raw points and
/// reports how close they land to the exact per-anchor solution. Writes
/// `oracle.json`.
pub fn run_oracle_check(cfg: &RunConfig) -> Result<OracleReport> {
    cfg.validate()?;
    let ds = build_dataset(cfg)?;
    let tc = cfg.resolved_train(ds.true_fn_rate());
    let encoder = frozen_encoder(cfg, ds.dim())?;
    let emb = forward(&encoder, &ds.points)?.into_embeddings();
    let n = emb.rows();
    let batch_size = if cfg.oracle_batch_size == 0 {
        n
    } else {
        cfg.oracle_batch_size
    };
    let fit = StreamingFit {
        alpha: tc.loss.alpha,
        lr: tc.lambda_lr,
        beta1: tc.lambda_beta1,
        beta2: tc.lambda_beta2,
        mode: tc.lambda_mode,
        batch_size,
        epochs: cfg.oracle_epochs,
        seed: tc.seed,
    };
    let state = fit_thresholds(&emb, &fit)?;
    let (within, err) = compare_with_exact(&emb, &state, tc.loss.alpha, cfg.oracle_tolerance)?;
    let report = OracleReport {
        alpha: tc.loss.alpha,
        n,
        epochs: cfg.oracle_epochs,
        batch_size,
        lambda_mode: tc.lambda_mode,
        tolerance: cfg.oracle_tolerance,
        within_tolerance: within,
        lambda_mae: err.mae,
        lambda_rmse: err.rmse,
        predicted_fn_fraction: predicted_fn_fraction(&emb, &state.lambda)?,
    };
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("oracle.json"), &report)?;
    Ok(report)
}

/// Fraction of anchors within `tol` of their exact interval, and the error
/// against the interval's upper end (`s_k`).
pub fn compare_with_exact(emb: &Matrix, state: &ThresholdState, alpha: f64, tol: f64) -> Result<(f64, ThresholdError)> {
    let n = emb.rows();
    if alpha == 0.0 {
        let inside = state.lambda.iter().filter(|&&l| l == 1.0).count();
        return Ok((inside as f64 / n as f64, threshold_error(&state.lambda, &vec![1.0; n])?));
    }
    let sols = exact_solutions(emb, alpha)?;
    let inside = sols
        .iter()
        .zip(&state.lambda)
        .filter(|(s, &l)| s.distance(l) <= tol)
        .count();
    let kth: Vec<f64> = sols.iter().map(|s| s.kth_value).collect();
    Ok((inside as f64 / n as f64, threshold_error(&state.lambda, &kth)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    WarmupEpoch,
    BatchSize,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "warmup_epoch" => Ok(Self::WarmupEpoch),
            "batch_size" => Ok(Self::BatchSize),
            other => Err(Error::BadConfig(format!("cannot sweep over `{other}`"))),
        }
    }
}

impl SweepAxis {
    fn key(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::WarmupEpoch => "warmup_epoch",
            Self::BatchSize => "batch_size",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub fn_precision: f64,
    pub fn_recall: f64,
    pub fn_f1: f64,
    pub lambda_mae: f64,
    pub lambda_rmse: f64,
    pub predicted_fn_fraction: f64,
    pub final_loss: f64,
}

/// Runs one experiment per value (in parallel), each in its own
/// `<output_dir>/<axis>=<value>` directory, and writes `sweep.csv`.
pub fn run_sweep(base: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::BadConfig("sweep needs at least one value".into()));
    }
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(axis.key(), v)?;
            c.output_dir = base.output_dir.join(format!("{}={v}", axis.key()));
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = configs
        .par_iter()
        .zip(values)
        .map(|(c, v)| {
            let r = run_experiment(c)?;
            Ok(SweepRow {
                axis: axis.key().to_string(),
                value: v.clone(),
                fn_precision: r.summary.fn_precision,
                fn_recall: r.summary.fn_recall,
                fn_f1: r.summary.fn_f1,
                lambda_mae: r.summary.lambda_mae,
                lambda_rmse: r.summary.lambda_rmse,
                predicted_fn_fraction: r.summary.predicted_fn_fraction,
                final_loss: r.final_loss,
            })
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(&base.output_dir)?;
    let mut w = csv::Writer::from_path(base.output_dir.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Scores a trained unimodal checkpoint on its dataset. The encoder comes from
/// `checkpoint` (default `<output_dir>/encoder.json`) and the thresholds from
/// `thresholds.json` next to it. Predictions cover every ordered pair of
/// distinct samples at evaluation-time view 0. Writes `eval.json` into
/// `output_dir`.
pub fn run_eval(cfg: &RunConfig) -> Result<SummaryReport> {
    cfg.validate()?;
    if cfg.mode != Modality::Unimodal {
        return Err(Error::BadConfig("eval supports unimodal runs".into()));
    }
    let enc_path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("encoder.json"));
    let thr_path = enc_path.with_file_name("thresholds.json");
    let encoder = EncoderParams::from_json(&fs::read_to_string(&enc_path)?)?;
    let thresholds = ThresholdState::from_json(&fs::read_to_string(&thr_path)?)?;
    let ds = build_dataset(cfg)?;
    if thresholds.len() != ds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} thresholds for {} samples",
            thresholds.len(),
            ds.len()
        )));
    }
    if encoder.d_in() != ds.dim() {
        return Err(Error::DimMismatch(format!(
            "encoder expects {} inputs, dataset has {}",
            encoder.d_in(),
            ds.dim()
        )));
    }
    let tc = cfg.resolved_train(ds.true_fn_rate());
    let op = AugmentationOp::new(
        tc.noise_sigma,
        seeding::derive_seed(tc.seed, &[seeding::STREAM_AUGMENT]),
    )?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let z = forward(&encoder, &augment(&op, &ds, &all, 0, EVAL_EPOCH)?)?.into_embeddings();
    let mut conf = Confusion::default();
    let mut predicted = 0usize;
    for i in 0..ds.len() {
        for j in (0..ds.len()).filter(|&j| j != i) {
            let p = dot(z.row(i), z.row(j)).clamp(-1.0, 1.0) > thresholds.lambda[i];
            predicted += usize::from(p);
            conf.record(p, ds.labels[i] == ds.labels[j]);
        }
    }
    let n = ds.len();
    let reference = reference_or_one(tc.loss.alpha, n, || {
        approx_optimal_lambda(&encoder, &ds, &op, &all, tc.loss.alpha, cfg.eval_sample_count, tc.seed)
    })?;
    let err = threshold_error(&thresholds.lambda, &reference)?;
    let report = SummaryReport::new(&conf.scores(), &err, predicted as f64 / (n * (n - 1)) as f64);
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("eval.json"), &report)?;
    Ok(report)
}
