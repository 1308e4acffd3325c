//! Labeled synthetic data. Two samples with the same label are ground-truth
//! false negatives of each other.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numkit::{normalize_rows, Matrix};
use crate::seeding::{self, STREAM_AUGMENT, STREAM_DATA, STREAM_TEXT};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub points: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn new(points: Matrix, labels: Vec<usize>, n_classes: usize, seed: u64) -> Result<Self> {
        if labels.len() != points.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} points",
                labels.len(),
                points.rows()
            )));
        }
        let mut seen = vec![false; n_classes];
        for &l in &labels {
            if l >= n_classes {
                return Err(Error::BadConfig(format!("label {l} exceeds {n_classes} classes")));
            }
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::BadConfig("every class needs at least one sample".into()));
        }
        Ok(Self {
            points,
            labels,
            n_classes,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_classes];
        self.labels.iter().for_each(|&l| sizes[l] += 1);
        sizes
    }

    /// Fraction of ordered sample pairs `(i, j), i ≠ j` sharing a label:
    /// `Σ_c n_c(n_c − 1) / (n(n − 1))`.
    pub fn true_fn_rate(&self) -> f64 {
        let n = self.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let same: f64 = self
            .class_sizes()
            .iter()
            .map(|&c| (c * c.saturating_sub(1)) as f64)
            .sum();
        same / (n * (n - 1.0))
    }

    /// Writes `label,x0,x1,…` rows with a header line.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|k| format!("x{k}")));
        out.write_record(&header)?;
        for (row, &label) in self.points.iter_rows().zip(&self.labels) {
            let mut rec = vec![label.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the format written by [`write_csv`](Self::write_csv). The class
    /// count is `max(label) + 1`; the seed is not stored and reads back as 0.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let dim = rdr.headers()?.len().saturating_sub(1);
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let mut fields = rec.iter();
            let label = fields
                .next()
                .ok_or_else(|| Error::BadConfig("empty csv record".into()))?
                .parse::<usize>()
                .map_err(|e| Error::BadConfig(format!("bad label: {e}")))?;
            labels.push(label);
            for f in fields {
                data.push(
                    f.parse::<f64>()
                        .map_err(|e| Error::BadConfig(format!("bad coordinate `{f}`: {e}")))?,
                );
            }
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let points = Matrix::from_vec(labels.len(), dim, data)?;
        Self::new(points, labels, n_classes, 0)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Class centers uniform on the unit sphere; each point is its center plus
/// isotropic Gaussian noise with standard deviation `spread` per coordinate.
/// Labels are assigned in class order: sample `i` has label `i / per_class`.
pub fn make_gaussian_mixture(
    n_classes: usize,
    per_class: usize,
    d_in: usize,
    spread: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if n_classes == 0 || per_class == 0 || d_in == 0 {
        return Err(Error::BadConfig(
            "class count, class size and dimension must be positive".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::BadConfig(format!(
            "spread must be finite and >= 0, got {spread}"
        )));
    }
    let mut rng = seeding::stream(seed, &[STREAM_DATA]);
    let mut centers = Matrix::zeros(n_classes, d_in);
    loop {
        centers
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
        if let Ok(c) = normalize_rows(&centers) {
            centers = c;
            break;
        }
    }
    let n = n_classes * per_class;
    let mut points = Matrix::zeros(n, d_in);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i / per_class;
        labels.push(c);
        for k in 0..d_in {
            let noise: f64 = rng.sample(StandardNormal);
            points[(i, k)] = centers[(c, k)] + spread * noise;
        }
    }
    SyntheticDataset::new(points, labels, n_classes, seed)
}

/// Aligned image/text samples: pair `i` has the same label in both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub image: SyntheticDataset,
    pub text: SyntheticDataset,
}

impl PairedDataset {
    pub fn new(image: SyntheticDataset, text: SyntheticDataset) -> Result<Self> {
        if image.labels != text.labels {
            return Err(Error::ShapeMismatch("image and text labels must be aligned".into()));
        }
        Ok(Self { image, text })
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.image.labels
    }

    pub fn swapped(&self) -> Self {
        Self {
            image: self.text.clone(),
            text: self.image.clone(),
        }
    }
}

/// Two independent mixtures sharing the label layout; the text modality draws
/// its own class centers from a seed derived from `seed`.
pub fn make_paired_mixture(
    n_classes: usize,
    per_class: usize,
    d_image: usize,
    d_text: usize,
    spread: f64,
    seed: u64,
) -> Result<PairedDataset> {
    let image = make_gaussian_mixture(n_classes, per_class, d_image, spread, seed)?;
    let mut text = make_gaussian_mixture(
        n_classes,
        per_class,
        d_text,
        spread,
        seeding::derive_seed(seed, &[STREAM_TEXT]),
    )?;
    text.seed = seed;
    PairedDataset::new(image, text)
}

/// Additive Gaussian noise in input space, the stand-in for image augmentations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationOp {
    pub noise_sigma: f64,
    pub seed: u64,
}

impl AugmentationOp {
    pub fn new(noise_sigma: f64, seed: u64) -> Result<Self> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::BadConfig(format!("noise_sigma must be >= 0, got {noise_sigma}")));
        }
        Ok(Self { noise_sigma, seed })
    }

    /// One augmented copy of `point`; a pure function of
    /// `(seed, index, view, epoch)`.
    pub fn apply_one(&self, point: &[f64], index: usize, view: u64, epoch: u64, out: &mut [f64]) {
        out.copy_from_slice(point);
        if self.noise_sigma == 0.0 {
            return;
        }
        let mut rng = seeding::stream(self.seed, &[STREAM_AUGMENT, index as u64, view, epoch]);
        for v in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += self.noise_sigma * z;
        }
    }
}

/// Augmented copies of the listed points for one view in one epoch.
pub fn augment(
    op: &AugmentationOp,
    dataset: &SyntheticDataset,
    indices: &[usize],
    view: u64,
    epoch: u64,
) -> Result<Matrix> {
    let d = dataset.dim();
    let mut out = Matrix::zeros(indices.len(), d);
    for (r, &i) in indices.iter().enumerate() {
        if i >= dataset.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: dataset.len(),
            });
        }
        op.apply_one(dataset.points.row(i), i, view, epoch, out.row_mut(r));
    }
    Ok(out)
}

/// `true` where the negative shares the anchor's label.
pub fn ground_truth_fn_mask(labels: &[usize], anchor_id: usize, negative_ids: &[usize]) -> Vec<bool> {
    let a = labels[anchor_id];
    negative_ids.iter().map(|&j| labels[j] == a).collect()
}
