//! Dense row-major `f32` tensors and a reverse-mode tape.
//!
//! [`Tensor`] is an immutable value: every operation returns a new tensor and
//! leaves its inputs untouched. [`Graph`] records the same operations (in
//! `f64`) for gradient computation.

pub mod graph;
pub mod kernels;

pub use graph::{Gradients, Graph, Var};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero-sized dimension")]
    ZeroDim(Vec<usize>),
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} is invalid for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("avg_pool2d: stride {stride} does not divide grid {height}x{width}")]
    NonDivisibleStride {
        height: usize,
        width: usize,
        stride: usize,
    },
    #[error("avg_pool2d: kernel {kernel} must equal stride {stride}")]
    KernelStride { kernel: usize, stride: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl TensorError {
    /// True when an operation produced NaN or infinity.
    pub fn is_non_finite(&self) -> bool {
        matches!(self, Self::NonFinite { .. })
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Seeded generator used for every random initialisation in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    /// Builds a tensor, validating length, dimension sizes and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        check_finite("new", &data)?;
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(vec![n, n], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn rand_uniform(shape: impl Into<Vec<usize>>, lo: f32, hi: f32, rng: &mut impl Rng) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        let dist = Uniform::new_inclusive(lo, hi);
        Self::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
    }

    pub fn rand_normal(shape: impl Into<Vec<usize>>, mean: f32, std: f32, rng: &mut impl Rng) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        let dist = Normal::new(mean, std).expect("std must be finite and non-negative");
        Self::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() == rank {
            Ok(())
        } else {
            Err(TensorError::Rank {
                op,
                expected: rank,
                shape: self.shape.clone(),
            })
        }
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis < self.rank() {
            Ok(())
        } else {
            Err(TensorError::InvalidAxis {
                axis,
                rank: self.rank(),
            })
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Self::new(shape, self.data.clone())
    }

    pub fn transpose(&self) -> Result<Self> {
        self.expect_rank("transpose", 2)?;
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Self {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
        })
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (p, q, r) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let data = kernels::matmul(&self.data, &rhs.data, p, q, r);
        check_finite("matmul", &data)?;
        Ok(Self {
            shape: vec![p, r],
            data,
        })
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let data = kernels::softmax(&self.data, &self.shape, axis);
        check_finite("softmax", &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Arithmetic mean along `axis`; the axis is removed from the result.
    pub fn mean(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let data = kernels::mean(&self.data, &self.shape, axis);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data })
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() as f32
    }

    /// Average pooling over an `H×W×C` grid. Only `kernel == stride` is supported.
    pub fn avg_pool2d(&self, kernel: usize, stride: usize) -> Result<Self> {
        self.expect_rank("avg_pool2d", 3)?;
        if kernel != stride {
            return Err(TensorError::KernelStride { kernel, stride });
        }
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(TensorError::NonDivisibleStride {
                height: h,
                width: w,
                stride,
            });
        }
        Ok(Self {
            shape: vec![h / stride, w / stride, c],
            data: kernels::avg_pool_hwc(&self.data, h, w, c, stride),
        })
    }

    /// `x · weight (+ bias)` over the trailing dimension.
    pub fn affine(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Self> {
        let c = *self.shape.last().ok_or(TensorError::Rank {
            op: "affine",
            expected: 1,
            shape: vec![],
        })?;
        if weight.rank() != 2 || weight.shape[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        let d = weight.shape[1];
        if let Some(b) = bias {
            if b.shape != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "affine bias",
                    lhs: weight.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
        }
        let rows = self.numel() / c;
        let data = kernels::affine(&self.data, &weight.data, bias.map(|b| &b.data[..]), rows, c, d);
        check_finite("affine", &data)?;
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = d;
        Ok(Self { shape, data })
    }

    fn zip_with(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a as f64, b as f64) as f32)
            .collect();
        check_finite(op, &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_with(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f32) -> Result<Self> {
        let data: Vec<f32> = self.data.iter().map(|&v| v * factor).collect();
        check_finite("scale", &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn tanh(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.tanh()).collect(),
        }
    }

    /// Gathers rows of a rank-2 tensor (embedding lookup).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        self.expect_rank("select_rows", 2)?;
        let cols = self.shape[1];
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= self.shape[0] {
                return Err(TensorError::Index {
                    index: i,
                    len: self.shape[0],
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(vec![idx.len(), cols], data)
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Rank {
            op: "concat_rows",
            expected: 2,
            shape: vec![],
        })?;
        first.expect_rank("concat_rows", 2)?;
        let cols = first.shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != 2 || p.shape[1] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, cols], data)
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..q {
                    out[i * r + j] += a.data()[i * q + k] as f64 * b.data()[k * r + j] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn construction_rejects_bad_length_and_zero_dims() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::DataLength { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(Tensor::new(vec![0, 2], vec![]), Err(TensorError::ZeroDim(_))));
        assert!(matches!(
            Tensor::new(vec![1], vec![f32::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(id.matmul(&b).unwrap(), b);
        let r = m(&[&[1.0, 2.0]]).matmul(&m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_16x32x8() {
        let mut rng = seeded_rng(11);
        let a = Tensor::rand_uniform(vec![16, 32], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::rand_uniform(vec![32, 8], -1.0, 1.0, &mut rng).unwrap();
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((*g as f64 - e).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(vec![2, 3]).unwrap().matmul(&Tensor::zeros(vec![2, 3]).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn softmax_closed_forms() {
        let s = Tensor::full(vec![1, 3], 2.5).unwrap().softmax(1).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = Tensor::new(vec![2], vec![0.0, 3f32.ln()]).unwrap().softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-7);
        assert!((s.data()[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let s = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap().softmax(1).unwrap();
        // shifted-exponent oracle: exp(0) / (exp(0) + exp(-1000))
        let hi = 1.0 / (1.0 + (-1000.0f64).exp());
        let lo = (-1000.0f64).exp() * hi;
        assert!((s.data()[0] as f64 - hi).abs() < 1e-7);
        assert!((s.data()[1] as f64 - lo).abs() < 1e-7);
        assert!((s.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_axis() {
        let t = Tensor::zeros(vec![2, 2]).unwrap();
        assert_eq!(t.softmax(2).unwrap_err(), TensorError::InvalidAxis { axis: 2, rank: 2 });
        assert_eq!(t.mean(5).unwrap_err(), TensorError::InvalidAxis { axis: 5, rank: 2 });
    }

    #[test]
    fn mean_cases() {
        let t = m(&[&[1.0, 3.0], &[5.0, 7.0]]);
        // averaging each row
        assert_eq!(t.mean(1).unwrap().data(), &[2.0, 6.0]);
        // averaging across rows
        assert_eq!(t.mean(0).unwrap().data(), &[3.0, 5.0]);
        let single = m(&[&[4.0, -2.0, 9.0]]);
        assert_eq!(single.mean(0).unwrap().data(), single.data());

        let mut rng = seeded_rng(3);
        let r = Tensor::rand_uniform(vec![8, 8], -1.0, 1.0, &mut rng).unwrap();
        let got = r.mean(0).unwrap();
        for j in 0..8 {
            let mut s = 0.0f64;
            for i in 0..8 {
                s += r.data()[i * 8 + j] as f64;
            }
            assert!((got.data()[j] as f64 - s / 8.0).abs() < 1e-6);
        }
    }

    #[test]
    fn avg_pool_cases() {
        let c = Tensor::full(vec![4, 4, 3], 0.7).unwrap();
        let p = c.avg_pool2d(2, 2).unwrap();
        assert_eq!(p.shape(), &[2, 2, 3]);
        assert!(p.data().iter().all(|v| (v - 0.7).abs() < 1e-7));

        let mut rng = seeded_rng(5);
        let x = Tensor::rand_uniform(vec![6, 6, 2], -1.0, 1.0, &mut rng).unwrap();
        assert_eq!(x.avg_pool2d(1, 1).unwrap(), x);

        let g = x.avg_pool2d(6, 6).unwrap();
        for ch in 0..2 {
            let mean: f64 = (0..36).map(|i| x.data()[i * 2 + ch] as f64).sum::<f64>() / 36.0;
            assert!((g.data()[ch] as f64 - mean).abs() < 1e-6);
        }
        assert!(matches!(
            x.avg_pool2d(4, 4),
            Err(TensorError::NonDivisibleStride { stride: 4, .. })
        ));
        assert!(matches!(x.avg_pool2d(2, 3), Err(TensorError::KernelStride { .. })));
    }

    #[test]
    fn affine_cases() {
        let mut rng = seeded_rng(9);
        let x = Tensor::rand_uniform(vec![5, 4], -1.0, 1.0, &mut rng).unwrap();
        let zero_b = Tensor::zeros(vec![4]).unwrap();
        assert_eq!(x.affine(&Tensor::eye(4).unwrap(), Some(&zero_b)).unwrap(), x);

        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = x.affine(&Tensor::zeros(vec![4, 3]).unwrap(), Some(&b)).unwrap();
        for r in 0..5 {
            assert_eq!(y.row(r), b.data());
        }

        let w = Tensor::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng).unwrap();
        let got = x.affine(&w, Some(&b)).unwrap();
        let mm = naive_matmul(&x, &w);
        for r in 0..5 {
            for d in 0..3 {
                let e = mm[r * 3 + d] + b.data()[d] as f64;
                assert!((got.data()[r * 3 + d] as f64 - e).abs() < 1e-6);
            }
        }
        assert!(matches!(
            x.affine(&Tensor::zeros(vec![3, 3]).unwrap(), None),
            Err(TensorError::ShapeMismatch { op: "affine", .. })
        ));
    }

    #[test]
    fn overflow_is_reported() {
        let big = Tensor::full(vec![1, 2], 3e38).unwrap();
        let w = Tensor::full(vec![2, 1], 10.0).unwrap();
        assert_eq!(big.matmul(&w).unwrap_err(), TensorError::NonFinite { op: "matmul" });
    }

    proptest! {
        #[test]
        fn softmax_slices_are_distributions(v in prop::collection::vec(-1000f32..1000f32, 1..24)) {
            let n = v.len();
            let s = Tensor::new(vec![1, n], v).unwrap().softmax(1).unwrap();
            prop_assert!(s.data().iter().all(|p| (0.0..=1.0).contains(p)));
            let total: f64 = s.data().iter().map(|&p| p as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }

        #[test]
        fn matmul_matches_oracle(p in 1usize..64, q in 1usize..64, r in 1usize..64, seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let a = Tensor::rand_uniform(vec![p, q], -1.0, 1.0, &mut rng).unwrap();
            let b = Tensor::rand_uniform(vec![q, r], -1.0, 1.0, &mut rng).unwrap();
            let got = a.matmul(&b).unwrap();
            for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
                prop_assert!((*g as f64 - e).abs() < 1e-6);
            }
        }
    }
}
