//! Minimal dense-tensor kernel: row-major `f64` storage, the handful of
//! matrix ops the pipeline needs, and the cross-entropy loss with its
//! analytic gradient.

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![r, c],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-d tensor (a vector counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Column count of a 2-d tensor (or the length of a vector).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        let cols = self.cols();
        &mut self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn row_tensor(&self, r: usize) -> Tensor {
        Tensor::vector(self.row(r).to_vec())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// self += other * factor, in place.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add_scaled",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * factor;
        }
        Ok(())
    }

    /// Add `row` into every row of a 2-d tensor.
    pub fn add_row_broadcast(&self, row: &Tensor) -> Result<Tensor> {
        if row.len() != self.cols() {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(row.data()) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Sum of rows, as a vector of length `cols`.
    pub fn column_sums(&self) -> Tensor {
        let mut out = vec![0.0; self.cols()];
        for r in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Tensor::vector(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(self, op: &'static str) -> Result<Tensor> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard matrix product of `a` (m x k) and `b` (k x n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, n) = (a.rows(), b.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out.check_finite("matmul")
}

/// Row-wise softmax of `m / scale`, computed with max-subtraction.
pub fn softmax_rows(m: &Tensor, scale: f64) -> Result<Tensor> {
    if scale <= 0.0 {
        return Err(Error::Degenerate {
            op: "softmax_rows",
            detail: format!("scale must be positive, got {scale}"),
        });
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        softmax_inplace(row, scale);
    }
    out.check_finite("softmax_rows")
}

/// In-place softmax of `values / scale` over a slice.
pub fn softmax_inplace(values: &mut [f64], scale: f64) {
    let max = values
        .iter()
        .map(|v| v / scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v / scale - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Cached statistics of one layer-norm application, for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

/// `gain * (v - mean) / sqrt(var + eps) + bias` over a vector of length >= 2.
pub fn layer_norm(v: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (out, _) = layer_norm_cached(v.data(), gain.data(), bias.data(), eps)?;
    Tensor::new(v.shape().to_vec(), out)?.check_finite("layer_norm")
}

pub fn layer_norm_cached(
    v: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, LayerNormCache)> {
    let n = v.len();
    if n < 2 {
        return Err(Error::Degenerate {
            op: "layer_norm",
            detail: format!("needs at least 2 elements, got {n}"),
        });
    }
    if gain.len() != n || bias.len() != n {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: vec![n],
            rhs: vec![gain.len(), bias.len()],
        });
    }
    if eps <= 0.0 {
        return Err(Error::Degenerate {
            op: "layer_norm",
            detail: "eps must be positive".into(),
        });
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let inv_std = 1.0 / (var + eps).sqrt();
    let normalized: Vec<f64> = v.iter().map(|x| (x - mean) * inv_std).collect();
    let out = normalized
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(x, (g, b))| g * x + b)
        .collect();
    Ok((
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Backward of one layer-norm row. Returns the input gradient and adds the
/// gain/bias gradients into the provided accumulators.
pub fn layer_norm_backward(
    dy: &[f64],
    gain: &[f64],
    cache: &LayerNormCache,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() as f64;
    let xhat = &cache.normalized;
    for i in 0..dy.len() {
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
    }
    let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
    let sum_dxhat: f64 = dxhat.iter().sum();
    let sum_dxhat_xhat: f64 = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum();
    xhat.iter()
        .zip(&dxhat)
        .map(|(x, d)| cache.inv_std * (d - sum_dxhat / n - x * sum_dxhat_xhat / n))
        .collect()
}

/// Mean negative log-likelihood over masked-in positions, plus the
/// softmax-minus-one-hot gradient (zero at masked-out positions).
pub fn cross_entropy_loss(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, Tensor)> {
    let (t, v) = (logits.rows(), logits.cols());
    if targets.len() != t || mask.len() != t {
        return Err(Error::Shape {
            op: "cross_entropy_loss",
            lhs: vec![t, v],
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let active = mask.iter().filter(|m| **m).count();
    if active == 0 {
        return Err(Error::Degenerate {
            op: "cross_entropy_loss",
            detail: "all positions masked out".into(),
        });
    }
    let mut grad = Tensor::zeros(vec![t, v]);
    let mut loss = 0.0;
    for pos in 0..t {
        if !mask[pos] {
            continue;
        }
        if targets[pos] >= v {
            return Err(Error::Degenerate {
                op: "cross_entropy_loss",
                detail: format!("target id {} out of vocab {v}", targets[pos]),
            });
        }
        let mut probs = logits.row(pos).to_vec();
        softmax_inplace(&mut probs, 1.0);
        loss -= probs[targets[pos]].max(f64::MIN_POSITIVE).ln();
        let grow = grad.row_mut(pos);
        for (g, p) in grow.iter_mut().zip(&probs) {
            *g = p / active as f64;
        }
        grow[targets[pos]] -= 1.0 / active as f64;
    }
    loss /= active as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy_loss"));
    }
    Ok((loss, grad))
}

/// Gaussian-error linear unit (tanh form) and its exact derivative.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let out = matmul(&eye, &b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    /// Element-wise triple-loop reference product.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                *out.at_mut(i, j) = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for (m, k, n) in [(5, 7, 3), (16, 16, 16), (1, 4, 9)] {
            let a = Tensor::new(vec![m, k], (0..m * k).map(|_| next()).collect()).unwrap();
            let b = Tensor::new(vec![k, n], (0..k * n).map(|_| next()).collect()).unwrap();
            let got = matmul(&a, &b).unwrap();
            let want = matmul_oracle(&a, &b);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_singleton() {
        let m = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let out = softmax_rows(&m, 1.0).unwrap();
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let single = Tensor::from_rows(&[vec![42.0]]).unwrap();
        let out = softmax_rows(&single, 3.0).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let scale = 2.0f64.sqrt();
        let out = softmax_rows(&m, scale).unwrap();
        let e1 = (1.0 / scale).exp();
        let e2 = (2.0 / scale).exp();
        assert!((out.data()[0] - e1 / (e1 + e2)).abs() < 1e-12);
        assert!((out.data()[1] - e2 / (e1 + e2)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_collapses_constant_input_to_bias() {
        let v = Tensor::vector(vec![3.0; 4]);
        let gain = Tensor::vector(vec![1.0; 4]);
        let bias = Tensor::vector(vec![0.0; 4]);
        let out = layer_norm(&v, &gain, &bias, 1e-5).unwrap();
        for x in out.data() {
            assert!(x.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_case() {
        let v = Tensor::vector(vec![1.0, -1.0]);
        let gain = Tensor::vector(vec![1.0, 1.0]);
        let bias = Tensor::vector(vec![0.0, 0.0]);
        let out = layer_norm(&v, &gain, &bias, 1e-12).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-5);
        assert!((out.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_zero_gain_returns_bias() {
        let v = Tensor::vector(vec![9.0, -4.0, 2.0]);
        let gain = Tensor::vector(vec![0.0; 3]);
        let bias = Tensor::vector(vec![7.0, 8.0, 9.0]);
        let out = layer_norm(&v, &gain, &bias, 1e-5).unwrap();
        assert_eq!(out.data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn layer_norm_rejects_degenerate_length() {
        let v = Tensor::vector(vec![1.0]);
        let one = Tensor::vector(vec![1.0]);
        assert!(layer_norm(&v, &one, &one, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let uniform = Tensor::zeros(vec![1, 4]);
        let (loss, _) = cross_entropy_loss(&uniform, &[2], &[true]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);

        let mut confident = Tensor::zeros(vec![1, 4]);
        *confident.at_mut(0, 1) = 100.0;
        let (loss, _) = cross_entropy_loss(&confident, &[1], &[true]).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_fully_masked() {
        let logits = Tensor::zeros(vec![2, 3]);
        assert!(cross_entropy_loss(&logits, &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let logits = Tensor::new(vec![3, 5], (0..15).map(|_| next() * 2.0).collect()).unwrap();
        let targets = [1usize, 4, 0];
        let mask = [true, false, true];
        let (_, grad) = cross_entropy_loss(&logits, &targets, &mask).unwrap();
        let eps = 1e-5;
        for idx in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[idx] += eps;
            let mut minus = logits.clone();
            minus.data_mut()[idx] -= eps;
            let (lp, _) = cross_entropy_loss(&plus, &targets, &mask).unwrap();
            let (lm, _) = cross_entropy_loss(&minus, &targets, &mask).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            assert!(
                (numeric - grad.data()[idx]).abs() < 1e-6,
                "idx {idx}: numeric {numeric} vs analytic {}",
                grad.data()[idx]
            );
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
            proptest::collection::vec(-50.0f64..50.0, 1..6), 1..5), scale in 0.1f64..10.0)
        {
            let width = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
            let m = Tensor::from_rows(&rows).unwrap();
            let out = softmax_rows(&m, scale).unwrap();
            for r in 0..out.rows() {
                let s: f64 = out.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn layer_norm_shift_invariant(v in proptest::collection::vec(-100.0f64..100.0, 2..9), shift in -50.0f64..50.0) {
            let n = v.len();
            let gain = Tensor::vector(vec![1.0; n]);
            let bias = Tensor::vector(vec![0.0; n]);
            let a = layer_norm(&Tensor::vector(v.clone()), &gain, &bias, 1e-5).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let b = layer_norm(&Tensor::vector(shifted), &gain, &bias, 1e-5).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
