//! Dense row-major f64 tensors plus the small numeric kernels everything
//! else is built from (dot products, mat-vec, softmax, entropy).
//!
//! All arithmetic is 64-bit and runs in a fixed order, so results are
//! bit-reproducible across runs and across worker threads.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real tensor: shape plus row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::InvalidInput(format!(
                "tensor data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expect
            )));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data,
        };
        t.check_finite()?;
        Ok(t)
    }

    /// Seeded Gaussian init, mean 0 and the given standard deviation.
    pub fn gaussian<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| gauss(rng) * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// NaN/Inf anywhere is an error state, never silently propagated.
    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(
                "tensor contains non-finite values".into(),
            ))
        }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }
}

/// Box–Muller with the uniform draws taken in a fixed order.
fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Named gradients, one entry per trainable parameter, shapes matching.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet(BTreeMap<String, Tensor>);

impl GradientSet {
    pub fn new() -> Self {
        GradientSet(BTreeMap::new())
    }

    /// Insert a zeroed slot for `name`.
    pub fn register(&mut self, name: &str, shape: &[usize]) {
        self.0.insert(name.to_string(), Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    /// Accumulate `other` into `self`; the key sets must match exactly.
    pub fn add_assign(&mut self, other: &GradientSet) {
        debug_assert_eq!(self.0.len(), other.0.len());
        for (name, grad) in self.0.iter_mut() {
            let o = other
                .0
                .get(name)
                .unwrap_or_else(|| panic!("gradient set mismatch at {name}"));
            for (g, v) in grad.data_mut().iter_mut().zip(o.data()) {
                *g += v;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.0.values_mut() {
            for g in grad.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, grad) in &self.0 {
            grad.check_finite().map_err(|_| {
                Error::InvalidInput(format!("non-finite gradient for parameter {name}"))
            })?;
        }
        Ok(())
    }
}

impl Deref for GradientSet {
    type Target = BTreeMap<String, Tensor>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl DerefMut for GradientSet {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

// ---------------------------------------------------------------------------
// Kernels. Four-accumulator reductions: faster than a serial fold and the
// summation order is fixed, which keeps results reproducible.
// ---------------------------------------------------------------------------

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `out += c * v`
pub(crate) fn axpy(out: &mut [f64], c: f64, v: &[f64]) {
    debug_assert_eq!(out.len(), v.len());
    for (o, x) in out.iter_mut().zip(v) {
        *o += c * x;
    }
}

/// `y = W x` for row-major `W: [rows, cols]`.
pub(crate) fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows).map(|r| dot(&w[r * cols..(r + 1) * cols], x)).collect()
}

/// `y = Wᵀ x` for row-major `W: [rows, cols]`; `x` has length `rows`.
pub(crate) fn matvec_t(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        axpy(&mut y, x[r], &w[r * cols..(r + 1) * cols]);
    }
    y
}

/// `dW += dy xᵀ` for row-major `dW: [rows, cols]`.
pub(crate) fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let rows = dy.len();
    let cols = x.len();
    debug_assert_eq!(dw.len(), rows * cols);
    for r in 0..rows {
        axpy(&mut dw[r * cols..(r + 1) * cols], dy[r], x);
    }
}

// ---------------------------------------------------------------------------
// Probability ops.
// ---------------------------------------------------------------------------

/// Numerically stabilized softmax of a 1-D logit vector.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 1 || logits.is_empty() {
        return Err(Error::InvalidInput(
            "softmax expects a nonempty 1-D tensor".into(),
        ));
    }
    logits.check_finite()?;
    let out = softmax_slice(logits.data());
    Tensor::from_vec(logits.shape(), out)
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub(crate) fn log_softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - lse).collect()
}

/// Shannon entropy in nats, with `0·ln 0 := 0`.
pub fn entropy(probs: &Tensor) -> Result<f64> {
    if probs.shape().len() != 1 || probs.is_empty() {
        return Err(Error::InvalidInput(
            "entropy expects a nonempty 1-D tensor".into(),
        ));
    }
    probs.check_finite()?;
    if probs.data().iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidInput(
            "entropy expects nonnegative probabilities".into(),
        ));
    }
    let sum: f64 = probs.data().iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "entropy expects probabilities summing to 1, got {sum}"
        )));
    }
    Ok(entropy_slice(probs.data()))
}

pub(crate) fn entropy_slice(probs: &[f64]) -> f64 {
    probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
    // ties resolve to the lowest index because only strict improvement moves `best`
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(data: &[f64]) -> Tensor {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(&t(&[0.0, 0.0, 0.0, 0.0])).unwrap();
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stabilized() {
        let p = softmax(&t(&[1000.0, 0.0])).unwrap();
        assert!(p.check_finite().is_ok());
        assert!(p.data()[0] > 1.0 - 1e-12);
        assert!(p.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_of_log_weights_is_normalized_weights() {
        let p = softmax(&t(&[1f64.ln(), 2f64.ln(), 3f64.ln(), 4f64.ln()])).unwrap();
        let expect = [0.1, 0.2, 0.3, 0.4];
        for (v, e) in p.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let bad = Tensor {
            shape: vec![2],
            data: vec![f64::NAN, 0.0],
        };
        assert!(matches!(softmax(&bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn entropy_fixtures() {
        assert!((entropy(&t(&[0.25; 4])).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&t(&[0.0, 1.0, 0.0])).unwrap(), 0.0);
        assert!((entropy(&t(&[0.5, 0.5, 0.0, 0.0])).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_bad_distributions() {
        assert!(entropy(&t(&[-0.1, 1.1])).is_err());
        assert!(entropy(&t(&[0.3, 0.3])).is_err());
    }

    #[test]
    fn tensor_shape_mismatch_is_error() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..13).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..13).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-1e4f64..1e4, 1..64)) {
            let p = softmax(&t(&logits)).unwrap();
            let sum: f64 = p.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_preserves_argmax(logits in proptest::collection::vec(-1e4f64..1e4, 1..64)) {
            let p = softmax(&t(&logits)).unwrap();
            prop_assert_eq!(argmax(&logits), argmax(p.data()));
        }

        #[test]
        fn entropy_is_permutation_invariant(
            weights in proptest::collection::vec(1e-6f64..1.0, 2..32),
            rot in 0usize..32,
        ) {
            let total: f64 = weights.iter().sum();
            let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let mut rotated = probs.clone();
            rotated.rotate_left(rot % probs.len());
            // renormalize exactly the same way to dodge representation drift
            let h1 = entropy_slice(&probs);
            let h2 = entropy_slice(&rotated);
            prop_assert!((h1 - h2).abs() < 1e-12);
            prop_assert!(h1 >= 0.0 && h1 <= (probs.len() as f64).ln() + 1e-12);
        }
    }
}
