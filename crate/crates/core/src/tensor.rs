//! Dense row-major tensors and the raw numeric kernels shared by the
//! compute graph and the inference path. Keeping one kernel per operation
//! guarantees the two paths produce bitwise-identical outputs.
//!
//! All reductions run left to right in index order so that identical inputs
//! give bitwise-identical results on every run.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn scalar_value(&self) -> S {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Number of rows when viewed as a matrix (trailing axis = columns).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn convert<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn to_f32_bits(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.to_f32()).collect()
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("add", a, b)?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// a[R x C] + b[C] broadcast over rows.
pub fn add_row<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.cols() != b.numel() {
        return Err(Error::ShapeMismatch {
            op: "add_row",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    let c = a.cols();
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        for j in 0..c {
            row[j] += b.data()[j];
        }
    }
    Ok(out)
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn scale<S: Scalar>(a: &Tensor<S>, c: S) -> Tensor<S> {
    a.map(|v| v * c)
}

pub fn sum<S: Scalar>(a: &Tensor<S>) -> S {
    let mut acc = S::ZERO;
    for &v in a.data() {
        acc += v;
    }
    acc
}

/// C[M x N] = A[M x K] * B[K x N]. ikj loop order; per-cell accumulation runs
/// over ascending k.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &av) in arow.iter().enumerate().take(k) {
            let brow = &b.data()[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

/// C[M x N] = A[M x K] * B[N x K]^T.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = S::ZERO;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] = acc;
        }
    }
    Ok(out)
}

/// C[K x N] = A[M x K]^T * B[M x N].
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = (a.rows(), a.cols());
    let (mb, n) = (b.rows(), b.cols());
    if m != mb {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[k, n]);
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (kk, &av) in arow.iter().enumerate().take(k) {
            let orow = &mut out.data_mut()[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

pub fn transpose<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data_mut()[j * m + i] = a.data()[i * n + j];
        }
    }
    out
}

/// Per-row zero-mean unit-variance normalization (biased variance) followed
/// by the affine gain/bias. Returns (output, mean, inv_std) so backward can
/// reuse the statistics.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: S,
) -> Result<(Tensor<S>, Vec<S>, Vec<S>)> {
    let f = x.cols();
    if gain.numel() != f || bias.numel() != f {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.rows();
    let mut out = Tensor::zeros(x.shape());
    let mut means = Vec::with_capacity(rows);
    let mut inv_stds = Vec::with_capacity(rows);
    let nf = S::from_f64(f as f64);
    for r in 0..rows {
        let row = x.row(r);
        let mut mean = S::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean / nf;
        let mut var = S::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var / nf;
        let inv_std = S::ONE / (var + eps).sqrt();
        let orow = out.row_mut(r);
        for j in 0..f {
            orow[j] = (row[j] - mean) * inv_std * gain.data()[j] + bias.data()[j];
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    Ok((out, means, inv_stds))
}

/// GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
pub const GELU_COEFF: f64 = 0.044715;
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let c = S::from_f64(GELU_COEFF);
    let s = S::from_f64(GELU_SQRT_2_OVER_PI);
    let half = S::from_f64(0.5);
    x.map(|v| {
        let u = s * (v + c * v * v * v);
        half * v * (S::ONE + u.tanh())
    })
}

pub fn gelu_derivative<S: Scalar>(v: S) -> S {
    let c = S::from_f64(GELU_COEFF);
    let s = S::from_f64(GELU_SQRT_2_OVER_PI);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = s * (v + c * v * v * v);
    let t = u.tanh();
    let du = s * (S::ONE + three * c * v * v);
    half * (S::ONE + t) + half * v * (S::ONE - t * t) * du
}

/// Additive value used to disable masked attention positions. Large enough
/// that exp underflows to exactly zero after max subtraction, small enough
/// to stay finite in f32.
pub const MASK_NEG: f64 = -1.0e30;

/// Row softmax with an optional boolean mask (false = position disabled).
/// Max-subtraction keeps the exponentials in range at logit scale 100.
pub fn masked_softmax<S: Scalar>(x: &Tensor<S>, mask: Option<&[bool]>) -> Tensor<S> {
    let (rows, cols) = (x.rows(), x.cols());
    if let Some(m) = mask {
        debug_assert_eq!(m.len(), rows * cols);
    }
    let neg = S::from_f64(MASK_NEG);
    let mut out = Tensor::zeros(x.shape());
    for r in 0..rows {
        let row = x.row(r);
        let mrow = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let masked = |j: usize| -> S {
            match mrow {
                Some(m) if !m[j] => row[j] + neg,
                _ => row[j],
            }
        };
        let mut max = masked(0);
        for j in 1..cols {
            max = max.max_val(masked(j));
        }
        let orow = out.row_mut(r);
        let mut denom = S::ZERO;
        for j in 0..cols {
            let e = (masked(j) - max).exp();
            orow[j] = e;
            denom += e;
        }
        for v in orow.iter_mut() {
            *v = *v / denom;
        }
    }
    out
}

/// L2-normalizes each row; errors on a zero-norm row. Returns the norms so
/// backward can reuse them.
pub fn l2_normalize_rows<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>)> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(x.shape());
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mut sq = S::ZERO;
        for &v in row {
            sq += v * v;
        }
        let norm = sq.sqrt();
        if !(norm > S::ZERO) {
            return Err(Error::DegenerateFeature { row: r });
        }
        let orow = out.row_mut(r);
        for j in 0..cols {
            orow[j] = row[j] / norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// log(sum(exp(row - max))) + max, per row.
pub fn log_sum_exp_rows<S: Scalar>(x: &Tensor<S>) -> Vec<S> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mut max = row[0];
        for &v in &row[1..] {
            max = max.max_val(v);
        }
        let mut acc = S::ZERO;
        for j in 0..cols {
            acc += (row[j] - max).exp();
        }
        out.push(acc.ln() + max);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let a = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = matmul(&z, &b).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0f64, -2.0, 0.5, 3.0, 1.5, -1.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![2.0, 0.0, 1.0, -1.0, 0.5, 4.0]).unwrap();
        let nn = matmul(&a, &b).unwrap();
        let nt = matmul_nt(&a, &transpose(&b)).unwrap();
        let tn = matmul_tn(&transpose(&a), &b).unwrap();
        for (x, y) in nn.data().iter().zip(nt.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in nn.data().iter().zip(tn.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::from_vec(&[1, 3], vec![1.0f64, 1.0, 1.0]).unwrap();
        let gain = Tensor::filled(&[3], 1.0);
        let bias = Tensor::zeros(&[3]);
        let (y, _, _) = layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_unit_variance_case() {
        // x=[1,-1] has mean 0 and variance 1, so eps->0 returns x.
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, -1.0]).unwrap();
        let gain = Tensor::filled(&[2], 1.0);
        let bias = Tensor::zeros(&[2]);
        let (y, _, _) = layer_norm(&x, &gain, &bias, 1e-15).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!((y.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_affine_case() {
        // x=[0,2], gain=2, bias=1 -> normalize to [-1,1] -> [-1,3].
        let x = Tensor::from_vec(&[1, 2], vec![0.0f64, 2.0]).unwrap();
        let gain = Tensor::filled(&[2], 2.0);
        let bias = Tensor::filled(&[2], 1.0);
        let (y, _, _) = layer_norm(&x, &gain, &bias, 1e-15).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn masked_softmax_zeroes_masked_positions() {
        let x = Tensor::from_vec(&[1, 3], vec![5.0f64, 1.0, 2.0]).unwrap();
        let mask = vec![true, false, true];
        let p = masked_softmax(&x, Some(&mask));
        assert_eq!(p.data()[1], 0.0);
        let s: f64 = p.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::from_vec(&[1, 2], vec![0.0f64, 1000.0]).unwrap();
        let p = masked_softmax(&x, None);
        assert!(p.all_finite());
        assert!((p.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        match l2_normalize_rows(&x) {
            Err(Error::DegenerateFeature { row }) => assert_eq!(row, 0),
            other => panic!("expected degenerate feature, got {other:?}"),
        }
    }
}
