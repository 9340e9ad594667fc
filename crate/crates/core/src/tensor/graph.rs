//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Values and
//! gradients are kept in `f64`: the tape exists for gradient checks and toy
//! training, where `f32` central differences cannot resolve small errors.

use super::kernels::{self, axis_split};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    MatMul(Var, Var),
    Transpose(Var),
    Softmax { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    AvgPool { input: Var, kernel: usize },
    Affine { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sum(Var),
    SelectRows { table: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    corrupt_matmul_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.get(v)?;
        Tensor::new(self.shapes[v.0].clone(), g.iter().map(|&x| x as f32).collect()).ok()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: scales the left-hand matmul gradient by 1.01 so that
    /// gradient checks are known to fail.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self) {
        self.corrupt_matmul_grad = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "graph" });
        }
        self.nodes.push(Node { shape, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value_f64(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Value rounded back to an `f32` tensor.
    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.iter().map(|&x| x as f32).collect())
            .expect("graph values are finite and shape-consistent")
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf_f64(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect(), true)
            .expect("tensor data is finite")
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf_f64(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect(), false)
            .expect("tensor data is finite")
    }

    pub fn leaf_f64(&mut self, shape: Vec<usize>, value: Vec<f64>, trainable: bool) -> Result<Var> {
        let expected: usize = shape.iter().product();
        if expected != value.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: value.len(),
            });
        }
        self.push(shape, value, Op::Leaf { trainable })
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            })
        }
    }

    fn check_axis(&self, v: Var, axis: usize) -> Result<()> {
        let rank = self.shape(v).len();
        if axis < rank {
            Ok(())
        } else {
            Err(TensorError::InvalidAxis { axis, rank })
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        };
        let (p, q) = self.rank2("matmul", a).map_err(|_| mismatch())?;
        let (q2, r) = self.rank2("matmul", b).map_err(|_| mismatch())?;
        if q != q2 {
            return Err(mismatch());
        }
        let value = kernels::matmul(self.value_f64(a), self.value_f64(b), p, q, r);
        self.push(vec![p, r], value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", a)?;
        let value = kernels::transpose(self.value_f64(a), r, c);
        self.push(vec![c, r], value, Op::Transpose(a))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_axis(input, axis)?;
        let shape = self.shape(input).to_vec();
        let value = kernels::softmax(self.value_f64(input), &shape, axis);
        self.push(shape, value, Op::Softmax { input, axis })
    }

    pub fn mean(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_axis(input, axis)?;
        let mut shape = self.shape(input).to_vec();
        let value = kernels::mean(self.value_f64(input), &shape, axis);
        shape.remove(axis);
        self.push(shape, value, Op::Mean { input, axis })
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (h, w, c) = match self.shape(input) {
            [h, w, c] => (*h, *w, *c),
            s => {
                return Err(TensorError::Rank {
                    op: "avg_pool2d",
                    expected: 3,
                    shape: s.to_vec(),
                })
            }
        };
        if kernel != stride {
            return Err(TensorError::KernelStride { kernel, stride });
        }
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(TensorError::NonDivisibleStride {
                height: h,
                width: w,
                stride,
            });
        }
        let value = kernels::avg_pool_hwc(self.value_f64(input), h, w, c, kernel);
        self.push(vec![h / kernel, w / kernel, c], value, Op::AvgPool { input, kernel })
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let c = *xs.last().ok_or(TensorError::Rank {
            op: "affine",
            expected: 1,
            shape: vec![],
        })?;
        if ws.len() != 2 || ws[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: xs,
                rhs: ws,
            });
        }
        let d = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "affine bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.value_f64(x).len() / c;
        let value = kernels::affine(
            self.value_f64(x),
            self.value_f64(w),
            b.map(|b| self.value_f64(b)),
            rows,
            c,
            d,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d;
        self.push(shape, value, Op::Affine { x, w, b })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value_f64(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value_f64(a).to_vec();
        self.push(shape, value, Op::Reshape(a))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let value = self
            .value_f64(a)
            .iter()
            .zip(self.value_f64(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value_f64(a).iter().map(|v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value_f64(a).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Tanh(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value_f64(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    pub fn select_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rank2("select_rows", table)?;
        let src = self.value_f64(table);
        let mut value = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index { index: i, len: rows });
            }
            value.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        self.push(
            vec![idx.len(), cols],
            value,
            Op::SelectRows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Rank {
            op: "concat_rows",
            expected: 2,
            shape: vec![],
        })?;
        let (_, cols) = self.rank2("concat_rows", first)?;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            match self.shape(p) {
                [r, c] if *c == cols => rows += r,
                s => {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: self.shape(first).to_vec(),
                        rhs: s.to_vec(),
                    })
                }
            }
            value.extend_from_slice(self.value_f64(p));
        }
        self.push(vec![rows, cols], value, Op::ConcatRows(parts.to_vec()))
    }

    /// Propagates d(loss)/d(node) back to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl Fn(&mut [f64])) {
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (p, q) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let r = self.shape(*b)[1];
                    let bt = kernels::transpose(self.value_f64(*b), q, r);
                    let mut ga = kernels::matmul(&gy, &bt, p, r, q);
                    if self.corrupt_matmul_grad {
                        ga.iter_mut().for_each(|v| *v *= 1.01);
                    }
                    let at = kernels::transpose(self.value_f64(*a), p, q);
                    let gb = kernels::matmul(&at, &gy, q, p, r);
                    acc(&mut grads, *a, p * q, |g| add_into(g, &ga));
                    acc(&mut grads, *b, q * r, |g| add_into(g, &gb));
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let ga = kernels::transpose(&gy, c, r);
                    acc(&mut grads, *a, r * c, |g| add_into(g, &ga));
                }
                Op::Softmax { input, axis } => {
                    let (outer, len, inner) = axis_split(&node.shape, *axis);
                    let y = &node.value;
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + j;
                            let dot: f64 = (0..len).map(|k| gy[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] = y[at(k)] * (gy[at(k)] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *input, y.len(), |g| add_into(g, &gx));
                }
                Op::Mean { input, axis } => {
                    let in_shape = self.shape(*input);
                    let (outer, len, inner) = axis_split(in_shape, *axis);
                    let n = outer * len * inner;
                    acc(&mut grads, *input, n, |g| {
                        for o in 0..outer {
                            for k in 0..len {
                                for j in 0..inner {
                                    g[o * len * inner + k * inner + j] += gy[o * inner + j] / len as f64;
                                }
                            }
                        }
                    });
                }
                Op::AvgPool { input, kernel } => {
                    let (h, w, c) = {
                        let s = self.shape(*input);
                        (s[0], s[1], s[2])
                    };
                    let ow = w / kernel;
                    let norm = (kernel * kernel) as f64;
                    acc(&mut grads, *input, h * w * c, |g| {
                        for y in 0..h {
                            for x in 0..w {
                                let src = ((y / kernel) * ow + x / kernel) * c;
                                let dst = (y * w + x) * c;
                                for ch in 0..c {
                                    g[dst + ch] += gy[src + ch] / norm;
                                }
                            }
                        }
                    });
                }
                Op::Affine { x, w, b } => {
                    let (c, d) = (self.shape(*w)[0], self.shape(*w)[1]);
                    let xv = self.value_f64(*x);
                    let rows = xv.len() / c;
                    let wt = kernels::transpose(self.value_f64(*w), c, d);
                    let gx = kernels::matmul(&gy, &wt, rows, d, c);
                    let xt = kernels::transpose(xv, rows, c);
                    let gw = kernels::matmul(&xt, &gy, c, rows, d);
                    acc(&mut grads, *x, rows * c, |g| add_into(g, &gx));
                    acc(&mut grads, *w, c * d, |g| add_into(g, &gw));
                    if let Some(b) = b {
                        acc(&mut grads, *b, d, |g| {
                            for row in gy.chunks_exact(d) {
                                add_into(g, row);
                            }
                        });
                    }
                }
                Op::Reshape(a) => acc(&mut grads, *a, gy.len(), |g| add_into(g, &gy)),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.len(), |g| add_into(g, &gy));
                    acc(&mut grads, *b, gy.len(), |g| add_into(g, &gy));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, gy.len(), |g| add_into(g, &gy));
                    acc(&mut grads, *b, gy.len(), |g| {
                        g.iter_mut().zip(&gy).for_each(|(o, v)| *o -= v)
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value_f64(*a), self.value_f64(*b));
                    let ga: Vec<f64> = gy.iter().zip(bv).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = gy.iter().zip(av).map(|(g, x)| g * x).collect();
                    acc(&mut grads, *a, gy.len(), |g| add_into(g, &ga));
                    acc(&mut grads, *b, gy.len(), |g| add_into(g, &gb));
                }
                Op::Scale(a, factor) => acc(&mut grads, *a, gy.len(), |g| {
                    g.iter_mut().zip(&gy).for_each(|(o, v)| *o += v * factor)
                }),
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, gy.len(), |g| {
                        for ((o, gv), yv) in g.iter_mut().zip(&gy).zip(y) {
                            *o += gv * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Sum(a) => {
                    let n = self.value_f64(*a).len();
                    acc(&mut grads, *a, n, |g| g.iter_mut().for_each(|o| *o += gy[0]));
                }
                Op::SelectRows { table, idx } => {
                    let (rows, cols) = (self.shape(*table)[0], self.shape(*table)[1]);
                    acc(&mut grads, *table, rows * cols, |g| {
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut g[i * cols..(i + 1) * cols], &gy[r * cols..(r + 1) * cols]);
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value_f64(*p).len();
                        let slice = &gy[offset..offset + n];
                        acc(&mut grads, *p, n, |g| add_into(g, slice));
                        offset += n;
                    }
                }
            }
        }

        // keep gradients only for trainable leaves, zero-filled if untouched
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.shape.clone()).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf { trainable: true } => {
                    if grads[i].is_none() {
                        grads[i] = Some(vec![0.0; node.value.len()]);
                    }
                }
                _ => grads[i] = None,
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
