//! Two-layer encoder `x ↦ normalize(tanh(x·W1 + b1)·W2 + b2)` with an
//! explicit backward pass.
//!
//! The unit normalization is part of the forward pass so downstream code can
//! use plain dot products as cosine similarities; backward therefore includes
//! the normalization Jacobian `(I − z·zᵀ)/‖p‖`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, Matrix, ZERO_NORM};

/// Encoder weights. `w1` is `d_in × d_hid`, `w2` is `d_hid × d_emb`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRecord", into = "ParamsRecord")]
pub struct EncoderParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Gradients, shaped like [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Intermediates kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    input: Matrix,
    hidden: Matrix,
    pre_norm: Vec<f64>,
    output: Matrix,
}

impl ForwardTape {
    /// The unit-norm embeddings produced by the forward pass.
    pub fn embeddings(&self) -> &Matrix {
        &self.output
    }

    pub fn into_embeddings(self) -> Matrix {
        self.output
    }
}

impl EncoderParams {
    pub fn zeros(d_in: usize, d_hid: usize, d_emb: usize) -> Self {
        Self {
            w1: Matrix::zeros(d_in, d_hid),
            b1: vec![0.0; d_hid],
            w2: Matrix::zeros(d_hid, d_emb),
            b2: vec![0.0; d_emb],
        }
    }

    /// Uniform init in `±1/√fan_in` for weights and biases.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_hid: usize, d_emb: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d_in, d_hid, d_emb);
        let b1 = 1.0 / (d_in as f64).sqrt();
        let b2 = 1.0 / (d_hid as f64).sqrt();
        p.w1.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-b1..=b1));
        p.b1.iter_mut().for_each(|v| *v = rng.random_range(-b1..=b1));
        p.w2.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-b2..=b2));
        p.b2.iter_mut().for_each(|v| *v = rng.random_range(-b2..=b2));
        p
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_hid(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_emb(&self) -> usize {
        self.w2.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut rest = flat;
        for dst in [
            self.w1.data_mut(),
            &mut self.b1[..],
            self.w2.data_mut(),
            &mut self.b2[..],
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.b1.len() != self.w1.cols() || self.w2.rows() != self.w1.cols() || self.b2.len() != self.w2.cols() {
            return Err(Error::ShapeMismatch("encoder parameter shapes are inconsistent".into()));
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::BadConfig("encoder parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl EncoderGrads {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        Self {
            w1: Matrix::zeros(p.w1.rows(), p.w1.cols()),
            b1: vec![0.0; p.b1.len()],
            w2: Matrix::zeros(p.w2.rows(), p.w2.cols()),
            b2: vec![0.0; p.b2.len()],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) -> Result<()> {
        self.w1.add_assign(&other.w1)?;
        self.w2.add_assign(&other.w2)?;
        if self.b1.len() != other.b1.len() || self.b2.len() != other.b2.len() {
            return Err(Error::ShapeMismatch("bias gradient lengths differ".into()));
        }
        self.b1.iter_mut().zip(&other.b1).for_each(|(a, b)| *a += b);
        self.b2.iter_mut().zip(&other.b2).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.w1.scale(s);
        self.w2.scale(s);
        self.b1.iter_mut().for_each(|v| *v *= s);
        self.b2.iter_mut().for_each(|v| *v *= s);
    }
}

/// Runs the encoder on every input row.
pub fn forward(params: &EncoderParams, inputs: &Matrix) -> Result<ForwardTape> {
    if inputs.cols() != params.d_in() {
        return Err(Error::DimMismatch(format!(
            "inputs have {} columns, encoder expects {}",
            inputs.cols(),
            params.d_in()
        )));
    }
    let mut hidden = inputs.matmul(&params.w1)?;
    for i in 0..hidden.rows() {
        for (h, b) in hidden.row_mut(i).iter_mut().zip(&params.b1) {
            *h = (*h + b).tanh();
        }
    }
    let mut output = hidden.matmul(&params.w2)?;
    let mut pre_norm = Vec::with_capacity(output.rows());
    for i in 0..output.rows() {
        let row = output.row_mut(i);
        row.iter_mut().zip(&params.b2).for_each(|(p, b)| *p += b);
        let n = dot(row, row).sqrt();
        if n.is_nan() || n < ZERO_NORM {
            return Err(Error::ZeroRow { row: i, norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
        pre_norm.push(n);
    }
    Ok(ForwardTape {
        input: inputs.clone(),
        hidden,
        pre_norm,
        output,
    })
}

/// Gradient of `Σ grad_embeddings ⊙ embeddings` with respect to the parameters.
pub fn backward(params: &EncoderParams, tape: &ForwardTape, grad_embeddings: &Matrix) -> Result<EncoderGrads> {
    if grad_embeddings.shape() != tape.output.shape() {
        return Err(Error::ShapeMismatch(format!(
            "embedding gradient {:?} vs embeddings {:?}",
            grad_embeddings.shape(),
            tape.output.shape()
        )));
    }
    // through the normalization: dp = (g − z·(z·g)) / ‖p‖
    let mut d_pre = grad_embeddings.clone();
    for i in 0..d_pre.rows() {
        let z = tape.output.row(i);
        let zg = dot(z, grad_embeddings.row(i));
        let n = tape.pre_norm[i];
        for (d, &zk) in d_pre.row_mut(i).iter_mut().zip(z) {
            *d = (*d - zk * zg) / n;
        }
    }
    let w2 = tape.hidden.t_matmul(&d_pre)?;
    let b2 = column_sums(&d_pre);
    let mut d_hidden = d_pre.matmul_t(&params.w2)?;
    for i in 0..d_hidden.rows() {
        for (d, &h) in d_hidden.row_mut(i).iter_mut().zip(tape.hidden.row(i)) {
            *d *= 1.0 - h * h;
        }
    }
    let w1 = tape.input.t_matmul(&d_hidden)?;
    let b1 = column_sums(&d_hidden);
    Ok(EncoderGrads { w1, b1, w2, b2 })
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ParamsRecord {
    d_in: usize,
    d_hid: usize,
    d_emb: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl From<EncoderParams> for ParamsRecord {
    fn from(p: EncoderParams) -> Self {
        Self {
            d_in: p.d_in(),
            d_hid: p.d_hid(),
            d_emb: p.d_emb(),
            w1: p.w1.into_data(),
            b1: p.b1,
            w2: p.w2.into_data(),
            b2: p.b2,
        }
    }
}

impl TryFrom<ParamsRecord> for EncoderParams {
    type Error = Error;
    fn try_from(r: ParamsRecord) -> Result<Self> {
        let p = EncoderParams {
            w1: Matrix::from_vec(r.d_in, r.d_hid, r.w1)?,
            b1: r.b1,
            w2: Matrix::from_vec(r.d_hid, r.d_emb, r.w2)?,
            b2: r.b2,
        };
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Σ g ⊙ E(x) as a function of the flat parameter vector.
    fn probe(params: &EncoderParams, x: &Matrix, g: &Matrix) -> f64 {
        let t = forward(params, x).unwrap();
        t.embeddings().data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_weights_fail_normalization() {
        let p = EncoderParams::zeros(2, 3, 2);
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(forward(&p, &x), Err(Error::ZeroRow { .. })));
    }

    #[test]
    fn identity_encoder_preserves_axis() {
        let p = EncoderParams {
            w1: Matrix::identity(2),
            b1: vec![0.0; 2],
            w2: Matrix::identity(2),
            b2: vec![0.0; 2],
        };
        let x = Matrix::from_rows(&[[2.0, 0.0]]).unwrap();
        let t = forward(&p, &x).unwrap();
        assert_eq!(t.embeddings().row(0), &[1.0, 0.0]);
    }

    #[test]
    fn forward_outputs_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::init(5, 7, 3, &mut rng);
        let t = forward(&p, &random_inputs(9, 5, 4)).unwrap();
        for r in t.embeddings().iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_dim_mismatch() {
        let p = EncoderParams::zeros(3, 2, 2);
        assert!(matches!(forward(&p, &Matrix::zeros(1, 2)), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EncoderParams::init(4, 4, 3, &mut rng);
        let t = forward(&p, &random_inputs(3, 4, 6)).unwrap();
        let g = backward(&p, &t, &Matrix::zeros(3, 3)).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EncoderParams::init(4, 4, 3, &mut rng);
        let t = forward(&p, &random_inputs(3, 4, 6)).unwrap();
        assert!(matches!(
            backward(&p, &t, &Matrix::zeros(2, 3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn radial_upstream_is_annihilated() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = EncoderParams::init(4, 6, 3, &mut rng);
        let t = forward(&p, &random_inputs(5, 4, 10)).unwrap();
        let g = backward(&p, &t, &t.embeddings().clone()).unwrap();
        assert!(g.to_flat().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = EncoderParams::init(4, 5, 3, &mut rng);
        let t = forward(&p, &random_inputs(4, 4, 12)).unwrap();
        let up = random_inputs(4, 3, 13);
        let mut scaled = up.clone();
        scaled.scale(-2.5);
        let a = backward(&p, &t, &up).unwrap().to_flat();
        let b = backward(&p, &t, &scaled).unwrap().to_flat();
        for (x, y) in a.iter().zip(&b) {
            assert!((-2.5 * x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn single_row_two_by_two_closed_form() {
        // w1 = I, b1 = 0, w2 = I, b2 = 0; input x = (a, b).
        // h = tanh(x), z = h/‖h‖. For upstream g the w2 gradient is
        // hᵀ·(g − z(z·g))/‖h‖ and b2 gets (g − z(z·g))/‖h‖.
        let p = EncoderParams {
            w1: Matrix::identity(2),
            b1: vec![0.0; 2],
            w2: Matrix::identity(2),
            b2: vec![0.0; 2],
        };
        let (a, b) = (0.3_f64, -0.7_f64);
        let x = Matrix::from_rows(&[[a, b]]).unwrap();
        let g = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let t = forward(&p, &x).unwrap();
        let grads = backward(&p, &t, &g).unwrap();
        let (h1, h2) = (a.tanh(), b.tanh());
        let n = (h1 * h1 + h2 * h2).sqrt();
        let (z1, z2) = (h1 / n, h2 / n);
        let dp = [(1.0 - z1 * z1) / n, (-z1 * z2) / n];
        assert!((grads.b2[0] - dp[0]).abs() < 1e-14);
        assert!((grads.b2[1] - dp[1]).abs() < 1e-14);
        assert!((grads.w2[(0, 0)] - h1 * dp[0]).abs() < 1e-14);
        assert!((grads.w2[(1, 1)] - h2 * dp[1]).abs() < 1e-14);
        // hidden: dh = dp (w2 = I), then times 1 − h²
        assert!((grads.b1[0] - dp[0] * (1.0 - h1 * h1)).abs() < 1e-14);
        assert!((grads.w1[(1, 0)] - b * dp[0] * (1.0 - h1 * h1)).abs() < 1e-14);
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = EncoderParams::init(5, 6, 4, &mut rng);
        let x = random_inputs(3, 5, 22);
        let up = random_inputs(3, 4, 23);
        let t = forward(&p, &x).unwrap();
        let analytic = backward(&p, &t, &up).unwrap().to_flat();
        let base = p.to_flat();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let mut q = p.clone();
            let mut v = base.clone();
            v[k] += h;
            q.set_flat(&v).unwrap();
            let fp = probe(&q, &x, &up);
            v[k] -= 2.0 * h;
            q.set_flat(&v).unwrap();
            let fm = probe(&q, &x, &up);
            let num = (fp - fm) / (2.0 * h);
            let rel = (num - analytic[k]).abs() / num.abs().max(analytic[k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn json_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::init(3, 4, 2, &mut rng);
        let js = p.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&js).unwrap();
        assert_eq!(v["d_in"], 3);
        assert_eq!(v["w1"].as_array().unwrap().len(), 12);
        assert_eq!(EncoderParams::from_json(&js).unwrap(), p);
        let broken = js.replace("\"d_in\":3", "\"d_in\":5");
        assert!(EncoderParams::from_json(&broken).is_err());
    }
}
