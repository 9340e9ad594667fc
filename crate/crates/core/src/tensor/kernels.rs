//! Raw row-major kernels shared by the `f32` value tensors and the `f64` tape.
//!
//! Every kernel accumulates in `f64` and rounds once on store, so the `f32`
//! path carries a single rounding per output element.

pub trait Scalar: Copy + Default + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `a[p×q] · b[q×r]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; p * r];
    for i in 0..p {
        let row = &mut acc[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k].to_f64();
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aik * bv.to_f64();
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Max-shifted softmax over `axis`.
pub fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::default(); x.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len)
                .map(|k| x[at(k)].to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = (x[at(k)].to_f64() - max).exp();
                sum += *slot;
            }
            for (k, slot) in buf.iter().enumerate() {
                out[at(k)] = T::from_f64(slot / sum);
            }
        }
    }
    out
}

/// Mean over `axis`; the output drops that axis.
pub fn mean<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let s: f64 = (0..len)
                .map(|k| x[o * len * inner + k * inner + i].to_f64())
                .sum();
            out.push(T::from_f64(s / len as f64));
        }
    }
    out
}

/// Average pooling of an `h×w×c` grid with square window `k` and stride `k`.
pub fn avg_pool_hwc<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let mut acc = vec![0.0f64; oh * ow * c];
    for y in 0..h {
        for xx in 0..w {
            let dst = ((y / k) * ow + xx / k) * c;
            let src = (y * w + xx) * c;
            for ch in 0..c {
                acc[dst + ch] += x[src + ch].to_f64();
            }
        }
    }
    let norm = (k * k) as f64;
    acc.into_iter().map(|v| T::from_f64(v / norm)).collect()
}

/// `x[rows×c] · w[c×d] + bias[d]`
pub fn affine<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    rows: usize,
    c: usize,
    d: usize,
) -> Vec<T> {
    let mut out = matmul(x, w, rows, c, d);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(d) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o = T::from_f64(o.to_f64() + bv.to_f64());
            }
        }
    }
    out
}
