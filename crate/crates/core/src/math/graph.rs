//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar output with respect to every node that depends on
//! a parameter leaf.
//!
//! Non-smooth primitives use fixed subgradients: ReLU passes nothing at 0,
//! `clamp_min` passes the gradient when the input is at or above the floor,
//! and the max reductions (`segment_max`, `max_pool2d`) route to the first
//! index attaining the maximum.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    DivRows(Var, Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Arc<[usize]>),
    SegmentMax {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Sum(Var),
    RowSum(Var),
    RowNorm(Var),
    Slice {
        input: Var,
        offset: usize,
    },
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        spec: Conv2dSpec,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::DivRows(..) => "div_rows",
            Op::ConcatCols(..) => "concat",
            Op::GatherRows(..) => "gather_rows",
            Op::SegmentMax { .. } => "segment_max",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
            Op::RowNorm(..) => "row_norm",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the output does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<(&'static str, String)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First non-finite forward result, if any.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some((op, detail)) => Err(Error::Numeric {
                op,
                detail: detail.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Leaf that gradients are taken with respect to.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.fault.is_none() && !value.all_finite() {
            self.fault = Some((op.name(), format!("non-finite output of shape {:?}", value.shape())));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn same_len(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "{op}: operand sizes differ ({:?} vs {:?})",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "div");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.shape().len() == 2 && tb.shape().len() == 2, "matmul needs 2-D operands");
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        assert_eq!(k, tb.shape()[0], "matmul inner dimensions differ");
        let out = matmul_raw(ta.data(), tb.data(), n, k, m);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds the length-`m` vector `bias` to every row of the `[n, m]` matrix `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(bias));
        let m = ta.cols();
        assert_eq!(tb.len(), m, "add_bias width mismatch");
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let v = Tensor::from_parts(ta.shape().to_vec(), out);
        self.push(v, Op::AddBias(a, bias), &[a, bias])
    }

    /// Divides row `i` of `a` by `d[i]`.
    pub fn div_rows(&mut self, a: Var, d: Var) -> Var {
        let (ta, td) = (self.value(a), self.value(d));
        assert_eq!(ta.rows(), td.len(), "div_rows row count mismatch");
        let m = ta.cols();
        let mut out = ta.data().to_vec();
        for (row, &den) in out.chunks_mut(m.max(1)).zip(td.data()) {
            for x in row {
                *x /= den;
            }
        }
        let v = Tensor::from_parts(ta.shape().to_vec(), out);
        self.push(v, Op::DivRows(a, d), &[a, d])
    }

    /// Column-wise concatenation of `[n, p]` and `[n, q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.rows();
        assert_eq!(n, tb.rows(), "concat row count mismatch");
        let (p, q) = (ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&ta.data()[i * p..(i + 1) * p]);
            out.extend_from_slice(&tb.data()[i * q..(i + 1) * q]);
        }
        let v = Tensor::from_parts(vec![n, p + q], out);
        self.push(v, Op::ConcatCols(a, b), &[a, b])
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Var {
        let ta = self.value(a);
        let m = ta.cols();
        let mut out = Vec::with_capacity(index.len() * m);
        for &r in index.iter() {
            out.extend_from_slice(&ta.data()[r * m..(r + 1) * m]);
        }
        let v = Tensor::from_parts(vec![index.len(), m], out);
        self.push(v, Op::GatherRows(a, index), &[a])
    }

    /// Column-wise max over the rows of `a` grouped by `segment[row]`.
    ///
    /// Produces `[segments, cols]`. Empty segments yield zeros. Ties resolve
    /// to the lowest row index.
    pub fn segment_max(&mut self, a: Var, segment: &[usize], segments: usize) -> Var {
        let ta = self.value(a);
        let m = ta.cols();
        assert_eq!(segment.len(), ta.rows(), "segment_max needs one id per row");
        let mut out = vec![0.0; segments * m];
        let mut argmax = vec![usize::MAX; segments * m];
        for (row, &s) in segment.iter().enumerate() {
            let src = &ta.data()[row * m..(row + 1) * m];
            for c in 0..m {
                let slot = s * m + c;
                if argmax[slot] == usize::MAX || src[c] > out[slot] {
                    out[slot] = src[c];
                    argmax[slot] = row * m + c;
                }
            }
        }
        let v = Tensor::from_parts(vec![segments, m], out);
        self.push(v, Op::SegmentMax { input: a, argmax }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    /// Elementwise `max(a, floor)`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Sums each row of `[n, m]` into a length-`n` vector.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.cols().max(1);
        let out: Vec<f64> = ta.data().chunks(m).map(|r| r.iter().sum()).collect();
        self.push(Tensor::vector(out), Op::RowSum(a), &[a])
    }

    /// Euclidean norm of each row of `[n, m]`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.cols().max(1);
        let out: Vec<f64> = ta
            .data()
            .chunks(m)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(Tensor::vector(out), Op::RowNorm(a), &[a])
    }

    /// Contiguous view `[offset, offset + prod(shape))` of `a`'s buffer.
    pub fn slice(&mut self, a: Var, offset: usize, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let ta = self.value(a);
        assert!(offset + n <= ta.len(), "slice out of range");
        let v = Tensor::from_parts(shape.to_vec(), ta.data()[offset..offset + n].to_vec());
        self.push(v, Op::Slice { input: a, offset }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshaped(shape.to_vec())
            .expect("reshape element count");
        self.push(v, Op::Reshape(a), &[a])
    }

    /// 2-D convolution of a `[c_in, h, w]` input with a `[c_out, c_in, kh, kw]`
    /// kernel plus a length-`c_out` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, spec: Conv2dSpec) -> Var {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let [c_in, h, w] = dims3(x.shape());
        let ks = k.shape();
        assert_eq!(ks.len(), 4, "conv2d kernel must be 4-D");
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        assert_eq!(ks[1], c_in, "conv2d channel mismatch");
        assert_eq!(b.len(), c_out, "conv2d bias width");
        let (ho, wo) = conv_out(h, w, kh, kw, spec);
        let mut out = vec![0.0; c_out * ho * wo];
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += k.data()[((co * c_in + ci) * kh + ky) * kw + kx]
                                    * x.data()[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let v = Tensor::from_parts(vec![c_out, ho, wo], out);
        self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            },
            &[input, kernel, bias],
        )
    }

    /// Non-overlapping `size x size` max pooling of a `[c, h, w]` input;
    /// trailing rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Var {
        let x = self.value(input);
        let [c, h, w] = dims3(x.shape());
        let (ho, wo) = (h / size, w / size);
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = (ch * h + oy * size + dy) * w + ox * size + dx;
                            if best_idx == usize::MAX || x.data()[idx] > best {
                                best = x.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let v = Tensor::from_parts(vec![c, ho, wo], out);
        self.push(v, Op::MaxPool2d { input, argmax }, &[input])
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check()?;
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(tb, |g, b| g * b).reshaped_like(ta));
                acc(*b, g.zip_map(ta, |g, a| g * a).reshaped_like(tb));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(tb, |g, b| g / b).reshaped_like(ta));
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .zip(tb.data())
                    .map(|((g, a), b)| -g * a / (b * b))
                    .collect();
                acc(*b, Tensor::from_parts(tb.shape().to_vec(), gb));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    // dA = G B^T
                    let mut ga = vec![0.0; n * k];
                    for r in 0..n {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        for c in 0..k {
                            let brow = &tb.data()[c * m..(c + 1) * m];
                            ga[r * k + c] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, Tensor::from_parts(vec![n, k], ga));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T G
                    let mut gb = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        for c in 0..k {
                            let av = ta.data()[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[c * m..(c + 1) * m];
                            for (d, x) in dst.iter_mut().zip(grow) {
                                *d += av * x;
                            }
                        }
                    }
                    acc(*b, Tensor::from_parts(vec![k, m], gb));
                }
            }
            Op::AddBias(a, bias) => {
                let m = self.value(*bias).len();
                let mut gb = vec![0.0; m];
                for row in g.data().chunks(m.max(1)) {
                    for (d, x) in gb.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc(*a, g.clone());
                acc(*bias, Tensor::from_parts(self.shape(*bias).to_vec(), gb));
            }
            Op::DivRows(a, d) => {
                let (ta, td) = (self.value(*a), self.value(*d));
                let m = ta.cols().max(1);
                let mut ga = g.data().to_vec();
                let mut gd = vec![0.0; td.len()];
                for (r, row) in ga.chunks_mut(m).enumerate() {
                    let den = td.data()[r];
                    let xs = &ta.data()[r * m..(r + 1) * m];
                    let mut s = 0.0;
                    for (gv, x) in row.iter_mut().zip(xs) {
                        s += *gv * x;
                        *gv /= den;
                    }
                    gd[r] = -s / (den * den);
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), ga));
                acc(*d, Tensor::from_parts(td.shape().to_vec(), gd));
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                let n = self.value(*a).rows();
                let mut ga = Vec::with_capacity(n * p);
                let mut gb = Vec::with_capacity(n * q);
                for r in 0..n {
                    let row = &g.data()[r * (p + q)..(r + 1) * (p + q)];
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                acc(*a, Tensor::from_parts(self.shape(*a).to_vec(), ga));
                acc(*b, Tensor::from_parts(self.shape(*b).to_vec(), gb));
            }
            Op::GatherRows(a, index) => {
                let ta = self.value(*a);
                let m = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (i, &r) in index.iter().enumerate() {
                    for c in 0..m {
                        ga[r * m + c] += g.data()[i * m + c];
                    }
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::SegmentMax { input, argmax } | Op::MaxPool2d { input, argmax } => {
                let ta = self.value(*input);
                let mut ga = vec![0.0; ta.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        ga[src] += g.data()[o];
                    }
                }
                acc(*input, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                acc(*a, g.zip_map(ta, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |g, x| g / x)),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |g, x| 2.0 * g * x)),
            Op::Sqrt(a) => acc(*a, g.zip_map(y, |g, s| 0.5 * g / s)),
            Op::ClampMin(a, floor) => {
                let ta = self.value(*a);
                acc(*a, g.zip_map(ta, |g, x| if x >= *floor { g } else { 0.0 }));
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, Tensor::filled(self.shape(*a), gv));
            }
            Op::RowSum(a) => {
                let ta = self.value(*a);
                let m = ta.cols().max(1);
                let mut ga = Vec::with_capacity(ta.len());
                for &gv in g.data() {
                    ga.extend(std::iter::repeat_n(gv, m));
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::RowNorm(a) => {
                let ta = self.value(*a);
                let m = ta.cols().max(1);
                let mut ga = Vec::with_capacity(ta.len());
                for (r, row) in ta.data().chunks(m).enumerate() {
                    let n = y.data()[r];
                    let gv = g.data()[r];
                    ga.extend(row.iter().map(|x| if n > 0.0 { gv * x / n } else { 0.0 }));
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::Slice { input, offset } => {
                let ta = self.value(*input);
                let mut ga = vec![0.0; ta.len()];
                ga[*offset..*offset + g.len()].copy_from_slice(g.data());
                acc(*input, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::Reshape(a) => {
                acc(*a, g.clone().reshaped_like(self.value(*a)));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            } => {
                let (x, k) = (self.value(*input), self.value(*kernel));
                let [c_in, h, w] = dims3(x.shape());
                let ks = k.shape();
                let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
                let [_, ho, wo] = dims3(y.shape());
                let mut gx = vec![0.0; x.len()];
                let mut gk = vec![0.0; k.len()];
                let mut gb = vec![0.0; c_out];
                for co in 0..c_out {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g.data()[(co * ho + oy) * wo + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            gb[co] += gv;
                            for ci in 0..c_in {
                                for ky in 0..kh {
                                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * spec.stride + kx) as isize
                                            - spec.padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let ki = ((co * c_in + ci) * kh + ky) * kw + kx;
                                        let xi = (ci * h + iy as usize) * w + ix as usize;
                                        gk[ki] += gv * x.data()[xi];
                                        gx[xi] += gv * k.data()[ki];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*input, Tensor::from_parts(x.shape().to_vec(), gx));
                acc(*kernel, Tensor::from_parts(k.shape().to_vec(), gk));
                acc(*bias, Tensor::from_parts(self.shape(*bias).to_vec(), gb));
            }
        }
    }
}

trait ReshapeLike {
    fn reshaped_like(self, other: &Tensor) -> Tensor;
}

impl ReshapeLike for Tensor {
    fn reshaped_like(self, other: &Tensor) -> Tensor {
        Tensor::from_parts(other.shape().to_vec(), self.into_data())
    }
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    assert_eq!(shape.len(), 3, "expected a [channels, height, width] tensor");
    [shape[0], shape[1], shape[2]]
}

pub fn conv_out(h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec) -> (usize, usize) {
    let ho = (h + 2 * spec.padding).saturating_sub(kh) / spec.stride + 1;
    let wo = (w + 2 * spec.padding).saturating_sub(kw) / spec.stride + 1;
    (ho, wo)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let dst = &mut out[r * m..(r + 1) * m];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            for (d, bv) in dst.iter_mut().zip(&b[c * m..(c + 1) * m]) {
                *d += av * bv;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < rel, "relative error {} ({a:?} vs {b:?})", diff / scale);
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn constant_gate_scales_gradient() {
        let gate = Tensor::vector(vec![0.5, -2.0, 0.0]);
        let xv = Tensor::vector(vec![0.3, 1.1, -0.7]);
        let mut g = Graph::new();
        let x = g.param(xv.clone());
        let inner = g.square(x);
        let c = g.constant(gate.clone());
        let gated = g.mul(inner, c);
        let out = g.sum(gated);
        let grads = g.backward(out).unwrap();
        let expected: Vec<f64> = (0..3).map(|i| gate.data()[i] * 2.0 * xv.data()[i]).collect();
        assert_eq!(grads.get(x).data(), expected.as_slice());
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_reports_offending_primitive() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 2.0]));
        let y = g.log(x);
        let s = g.sum(y);
        match g.backward(s) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "log"),
            _ => panic!("expected numeric error"),
        }
    }

    #[test]
    fn segment_max_ties_route_to_first_row() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap());
        let m = g.segment_max(x, &[0, 0, 0], 1);
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_ties_route_to_first_index() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let p = g.max_pool2d(x, 2);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_output_sizes() {
        let spec = Conv2dSpec {
            stride: 1,
            padding: 0,
        };
        assert_eq!(conv_out(10, 10, 3, 3, spec), (8, 8));
        assert_eq!(conv_out(8, 8, 3, 3, spec), (6, 6));
    }

    /// Every primitive against central differences at a random point.
    #[test]
    fn primitives_match_finite_differences() {
        type Build = fn(&mut Graph, Var) -> Var;
        let cases: Vec<(&str, Vec<usize>, Build)> = vec![
            ("add/sub/mul/div", vec![2, 3], |g, x| {
                let c = g.constant(Tensor::matrix(2, 3, vec![1.5, 2.0, 3.0, 1.2, 2.2, 4.0]).unwrap());
                let a = g.add(x, c);
                let b = g.mul(a, x);
                let d = g.sub(b, x);
                let e = g.div(d, c);
                g.sum(e)
            }),
            ("matmul/bias/relu", vec![3, 4], |g, x| {
                let w = g.constant(Tensor::matrix(4, 2, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7, 0.2, 0.9]).unwrap());
                let b = g.constant(Tensor::vector(vec![0.05, -0.03]));
                let h = g.matmul(x, w);
                let h = g.add_bias(h, b);
                let h = g.relu(h);
                let h = g.square(h);
                g.sum(h)
            }),
            ("matmul rhs", vec![2, 2], |g, x| {
                let a = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.2]).unwrap());
                let h = g.matmul(a, x);
                let h = g.sigmoid(h);
                g.sum(h)
            }),
            ("log/sqrt/scale", vec![5], |g, x| {
                let s = g.square(x);
                let s = g.add_scalar(s, 1.0);
                let l = g.log(s);
                let r = g.sqrt(s);
                let t = g.add(l, r);
                let t = g.scale(t, 0.7);
                g.sum(t)
            }),
            ("row norm projection", vec![3, 4], |g, x| {
                let n = g.row_norm(x);
                let d = g.clamp_min(n, 0.5);
                let y = g.div_rows(x, d);
                let w = g.constant(Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap());
                let y = g.mul(y, w);
                let r = g.row_sum(y);
                g.sum(r)
            }),
            ("concat/gather/segment_max", vec![3, 2], |g, x| {
                let idx: Arc<[usize]> = Arc::from(vec![1, 2, 0, 2, 0, 1]);
                let e = g.gather_rows(x, idx);
                let c = g.constant(Tensor::matrix(6, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
                let e = g.concat_cols(e, c);
                let w = g.constant(Tensor::matrix(3, 2, vec![0.5, -0.3, 0.8, 0.2, -0.6, 0.4]).unwrap());
                let e = g.matmul(e, w);
                let m = g.segment_max(e, &[0, 0, 1, 1, 2, 2], 3);
                let m = g.square(m);
                g.sum(m)
            }),
            ("slice/reshape", vec![6], |g, x| {
                let a = g.slice(x, 1, &[2, 2]);
                let b = g.reshape(a, &[4]);
                let c = g.square(b);
                g.sum(c)
            }),
            ("conv/pool", vec![1, 5, 5], |g, x| {
                let k = g.constant(Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect()).unwrap());
                let b = g.constant(Tensor::vector(vec![0.1, -0.2]));
                let y = g.conv2d(x, k, b, Conv2dSpec { stride: 1, padding: 1 });
                let y = g.relu(y);
                let p = g.max_pool2d(y, 2);
                let p = g.square(p);
                g.sum(p)
            }),
        ];

        for (seed, (name, shape, build)) in cases.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let x0 = Tensor::new(shape.clone(), pseudo_random(n, seed as u64 + 11)).unwrap();
            let eval = |x: &Tensor| {
                let mut g = Graph::new();
                let v = g.constant(x.clone());
                let out = build(&mut g, v);
                g.value(out).item()
            };
            let mut g = Graph::new();
            let v = g.param(x0.clone());
            let out = build(&mut g, v);
            let analytic = g.backward(out).unwrap().get(v);
            let numeric = central_diff(eval, &x0, 1e-5);
            assert_close(analytic.data(), &numeric, 1e-4);
            let _ = name;
        }
    }

    #[test]
    fn conv_kernel_and_bias_gradients() {
        let xv = Tensor::new(vec![2, 4, 4], pseudo_random(32, 5)).unwrap();
        let kv = Tensor::new(vec![3, 2, 3, 3], pseudo_random(54, 6)).unwrap();
        let build = |g: &mut Graph, k: Var, b: Var, x: Var| {
            let y = g.conv2d(x, k, b, Conv2dSpec { stride: 1, padding: 0 });
            let y = g.square(y);
            g.sum(y)
        };
        let bv = Tensor::vector(vec![0.1, 0.0, -0.1]);
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let k = g.param(kv.clone());
        let b = g.param(bv.clone());
        let out = build(&mut g, k, b, x);
        let grads = g.backward(out).unwrap();
        let eval_k = |kt: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(xv.clone());
            let k = g.constant(kt.clone());
            let b = g.constant(bv.clone());
            let o = build(&mut g, k, b, x);
            g.value(o).item()
        };
        assert_close(grads.get(k).data(), &central_diff(eval_k, &kv, 1e-5), 1e-4);
        let eval_b = |bt: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(xv.clone());
            let k = g.constant(kv.clone());
            let b = g.constant(bt.clone());
            let o = build(&mut g, k, b, x);
            g.value(o).item()
        };
        assert_close(grads.get(b).data(), &central_diff(eval_b, &bv, 1e-5), 1e-4);
    }
}
