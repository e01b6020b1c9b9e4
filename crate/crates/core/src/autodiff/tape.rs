//! Reverse-mode differentiation tape.
//!
//! Ops append nodes in topological order; [`Tape::backward`] walks them in
//! reverse, accumulating gradients for every node that (transitively)
//! depends on a `requires_grad` leaf. Backward is a pure function of the
//! tape, so re-running it reproduces gradients bit for bit.
//!
//! Every op checks its output for non-finite values; NaN propagation is an
//! error, not a silent poisoning of the training run.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Conv2d { input: usize, kernel: usize, stride: usize, padding: usize },
    BiasAdd(usize, usize),
    Sigmoid(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Norm(usize),
    Softmax { a: usize, axis: usize },
    SumAxis { a: usize, axis: usize },
    Expand { a: usize, axis: usize, n: usize },
    Squash { a: usize, axis: usize },
    CapsulePredict { w: usize, u: usize },
    Upsample2x(usize),
    Reshape(usize),
    BilinearSample { img: usize, coords_x: usize, coords_y: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, if it participated.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

/// Differentiation record over dense tensors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Lane decomposition for axis ops: (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are tracked through it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFiniteValue(name));
        }
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_elementwise(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_elementwise(a, b, |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0), self.needs(a) || self.needs(b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_elementwise(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0), self.needs(a) || self.needs(b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_elementwise(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0), self.needs(a) || self.needs(b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.zip_elementwise(a, b, |x, y| x / y);
        self.push(v, Op::Div(a.0, b.0), self.needs(a) || self.needs(b), "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        self.push(v, Op::Scale(a.0, c), self.needs(a), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect())?;
        self.push(v, Op::AddScalar(a.0), self.needs(a), "add_scalar")
    }

    /// 2-D matrix product `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let ail = da[i * k + l];
                for j in 0..n {
                    out[i * n + j] += ail * db[l * n + j];
                }
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        self.push(v, Op::MatMul(a.0, b.0), self.needs(a) || self.needs(b), "matmul")
    }

    /// 2-D convolution: input `(Ci,H,W)`, kernel `(Co,Ci,kh,kw)`, zero
    /// padding, output `(Co,H',W')`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::ShapeMismatch("conv2d: stride must be >= 1".into()));
        }
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return Err(Error::ShapeMismatch(format!("conv2d: input {si:?}, kernel {sk:?}")));
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, kh, kw) = (sk[0], sk[2], sk[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input"
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let din = self.value(input).data();
        let dk = self.value(kernel).data();
        let mut out = vec![0.0; co * oh * ow];
        for c_out in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c_in in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as i64 - padding as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as i64 - padding as i64;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                acc += din[(c_in * h + iy as usize) * w + ix as usize]
                                    * dk[((c_out * ci + c_in) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(c_out * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let v = Tensor::new(vec![co, oh, ow], out)?;
        self.push(
            v,
            Op::Conv2d { input: input.0, kernel: kernel.0, stride, padding },
            self.needs(input) || self.needs(kernel),
            "conv2d",
        )
    }

    /// Adds a per-channel bias `(C)` to a `(C,H,W)` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::ShapeMismatch(format!("bias_add: {sx:?} + {sb:?}")));
        }
        let plane = sx[1] * sx[2];
        let dx = self.value(x).data();
        let db = self.value(bias).data();
        let mut out = Vec::with_capacity(dx.len());
        for c in 0..sx[0] {
            for i in 0..plane {
                out.push(dx[c * plane + i] + db[c]);
            }
        }
        let v = Tensor::new(sx, out)?;
        self.push(v, Op::BiasAdd(x.0, bias.0), self.needs(x) || self.needs(bias), "bias_add")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(v, Op::Sigmoid(a.0), self.needs(a), "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.max(0.0)).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(v, Op::Relu(a.0), self.needs(a), "relu")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), self.needs(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum();
        let v = Tensor::scalar(s / t.numel() as f64);
        self.push(v, Op::Mean(a.0), self.needs(a), "mean")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.abs()).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(v, Op::Abs(a.0), self.needs(a), "abs")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * x).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(v, Op::Square(a.0), self.needs(a), "square")
    }

    /// Elementwise square root; inputs must be non-negative.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.sqrt()).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(v, Op::Sqrt(a.0), self.needs(a), "sqrt")
    }

    /// Euclidean norm of the whole tensor, as a scalar.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Tensor::scalar(n), Op::Norm(a.0), self.needs(a), "norm")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(src[idx(k)]);
                }
                let mut denom = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    denom += e;
                }
                for k in 0..len {
                    out[idx(k)] /= denom;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(v, Op::Softmax { a: a.0, axis }, self.needs(a), "softmax")
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + k) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::SumAxis { a: a.0, axis }, self.needs(a), "sum_axis")
    }

    /// Inserts a new axis of length `n` at `axis`, replicating the data.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let t = self.value(a);
        if axis > t.shape().len() || n == 0 {
            return Err(Error::ShapeMismatch(format!(
                "expand: axis {axis} n {n} on shape {:?}",
                t.shape()
            )));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis..].iter().product();
        let src = t.data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.insert(axis, n);
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::Expand { a: a.0, axis, n }, self.needs(a), "expand")
    }

    /// Capsule squashing along `axis`: `v = s * |s| / (1 + |s|^2)` per lane,
    /// scaling the lane norm into `[0, 1)` while preserving direction.
    pub fn squash(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut n2 = 0.0;
                for k in 0..len {
                    n2 += src[idx(k)] * src[idx(k)];
                }
                let g = n2.sqrt() / (1.0 + n2);
                for k in 0..len {
                    out[idx(k)] = src[idx(k)] * g;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(v, Op::Squash { a: a.0, axis }, self.needs(a), "squash")
    }

    /// Capsule prediction vectors: weights `(I,J,Do,Di)` applied to lower
    /// capsules `(I,Di,P)`, giving `(I,J,Do,P)`.
    pub fn capsule_predict(&mut self, w: Var, u: Var) -> Result<Var> {
        let sw = self.value(w).shape().to_vec();
        let su = self.value(u).shape().to_vec();
        if sw.len() != 4 || su.len() != 3 || sw[0] != su[0] || sw[3] != su[1] {
            return Err(Error::ShapeMismatch(format!(
                "capsule_predict: weights {sw:?}, capsules {su:?}"
            )));
        }
        let (ni, nj, dout, din) = (sw[0], sw[1], sw[2], sw[3]);
        let p = su[2];
        let dw = self.value(w).data();
        let du = self.value(u).data();
        let mut out = vec![0.0; ni * nj * dout * p];
        for i in 0..ni {
            for j in 0..nj {
                for d in 0..dout {
                    for e in 0..din {
                        let wv = dw[((i * nj + j) * dout + d) * din + e];
                        if wv == 0.0 {
                            continue;
                        }
                        let ubase = (i * din + e) * p;
                        let obase = ((i * nj + j) * dout + d) * p;
                        for pos in 0..p {
                            out[obase + pos] += wv * du[ubase + pos];
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![ni, nj, dout, p], out)?;
        self.push(
            v,
            Op::CapsulePredict { w: w.0, u: u.0 },
            self.needs(w) || self.needs(u),
            "capsule_predict",
        )
    }

    /// Nearest-neighbor 2x upsampling of a `(C,H,W)` tensor.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch(format!("upsample2x: shape {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = t.data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let v = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        self.push(v, Op::Upsample2x(a.0), self.needs(a), "upsample2x")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        self.push(v, Op::Reshape(a.0), self.needs(a), "reshape")
    }

    /// Differentiable bilinear sampling of a 2-D image at
    /// `(coords_x, coords_y)` pixel positions (same shape as the output).
    ///
    /// Coordinates are edge-clamped; the coordinate gradient is zero in the
    /// clamped region and piecewise constant between integer grid lines.
    pub fn bilinear_sample(&mut self, img: Var, coords_x: Var, coords_y: Var) -> Result<Var> {
        let si = self.value(img).shape().to_vec();
        if si.len() != 2 {
            return Err(Error::ShapeMismatch(format!("bilinear_sample: image {si:?}")));
        }
        self.same_shape(coords_x, coords_y, "bilinear_sample coords")?;
        let (h, w) = (si[0], si[1]);
        let data = self.value(img).data();
        let cx = self.value(coords_x).data();
        let cy = self.value(coords_y).data();
        let mut out = vec![0.0; cx.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let u = cx[i].clamp(0.0, w as f64 - 1.0);
            let v = cy[i].clamp(0.0, h as f64 - 1.0);
            let x0 = u.floor() as usize;
            let y0 = v.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ax = u - x0 as f64;
            let ay = v - y0 as f64;
            *o = (1.0 - ay) * ((1.0 - ax) * data[y0 * w + x0] + ax * data[y0 * w + x1])
                + ay * ((1.0 - ax) * data[y1 * w + x0] + ax * data[y1 * w + x1]);
        }
        let shape = self.value(coords_x).shape().to_vec();
        let v = Tensor::new(shape, out)?;
        self.push(
            v,
            Op::BilinearSample { img: img.0, coords_x: coords_x.0, coords_y: coords_y.0 },
            self.needs(img) || self.needs(coords_x) || self.needs(coords_y),
            "bilinear_sample",
        )
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node on
    /// a `requires_grad` path; other nodes report `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = &self.nodes[loss.0].value;
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(loss_val.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn add_into(&self, grads: &mut [Option<Tensor>], target: usize, delta: Tensor) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let shape_of = |i: usize| self.nodes[i].value.shape().to_vec();
        let data_of = |i: usize| self.nodes[i].value.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(grads, *a, gout.clone());
                self.add_into(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, gout.clone());
                let neg = Tensor::new(shape_of(*b), gout.data().iter().map(|g| -g).collect())
                    .expect("shape");
                self.add_into(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let ga = Tensor::new(
                    shape_of(*a),
                    gout.data().iter().zip(data_of(*b)).map(|(g, y)| g * y).collect(),
                )
                .expect("shape");
                let gb = Tensor::new(
                    shape_of(*b),
                    gout.data().iter().zip(data_of(*a)).map(|(g, x)| g * x).collect(),
                )
                .expect("shape");
                self.add_into(grads, *a, ga);
                self.add_into(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let (da, db) = (data_of(*a), data_of(*b));
                let ga = Tensor::new(
                    shape_of(*a),
                    gout.data().iter().zip(db).map(|(g, y)| g / y).collect(),
                )
                .expect("shape");
                let gb = Tensor::new(
                    shape_of(*b),
                    gout.data()
                        .iter()
                        .zip(da.iter().zip(db))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                )
                .expect("shape");
                self.add_into(grads, *a, ga);
                self.add_into(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let ga = Tensor::new(shape_of(*a), gout.data().iter().map(|g| g * c).collect())
                    .expect("shape");
                self.add_into(grads, *a, ga);
            }
            Op::AddScalar(a) => {
                self.add_into(grads, *a, gout.clone());
            }
            Op::MatMul(a, b) => {
                let sa = shape_of(*a);
                let sb = shape_of(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db, dg) = (data_of(*a), data_of(*b), gout.data());
                // dA = G B^T, dB = A^T G
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for l in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += dg[i * n + j] * db[l * n + j];
                        }
                        ga[i * k + l] = acc;
                    }
                }
                let mut gb = vec![0.0; k * n];
                for l in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += da[i * k + l] * dg[i * n + j];
                        }
                        gb[l * n + j] = acc;
                    }
                }
                self.add_into(grads, *a, Tensor::new(sa, ga).expect("shape"));
                self.add_into(grads, *b, Tensor::new(sb, gb).expect("shape"));
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let si = shape_of(*input);
                let sk = shape_of(*kernel);
                let (ci, h, w) = (si[0], si[1], si[2]);
                let (co, kh, kw) = (sk[0], sk[2], sk[3]);
                let so = self.nodes[idx].value.shape();
                let (oh, ow) = (so[1], so[2]);
                let din = data_of(*input);
                let dk = data_of(*kernel);
                let dg = gout.data();
                let mut gi = vec![0.0; din.len()];
                let mut gk = vec![0.0; dk.len()];
                for c_out in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dg[(c_out * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for c_in in 0..ci {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as i64 - *padding as i64;
                                    if iy < 0 || iy >= h as i64 {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as i64 - *padding as i64;
                                        if ix < 0 || ix >= w as i64 {
                                            continue;
                                        }
                                        let ii = (c_in * h + iy as usize) * w + ix as usize;
                                        let ki = ((c_out * ci + c_in) * kh + ky) * kw + kx;
                                        gi[ii] += g * dk[ki];
                                        gk[ki] += g * din[ii];
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_into(grads, *input, Tensor::new(si, gi).expect("shape"));
                self.add_into(grads, *kernel, Tensor::new(sk, gk).expect("shape"));
            }
            Op::BiasAdd(x, b) => {
                self.add_into(grads, *x, gout.clone());
                let sx = shape_of(*x);
                let plane = sx[1] * sx[2];
                let mut gb = vec![0.0; sx[0]];
                for (c, item) in gb.iter_mut().enumerate() {
                    *item = gout.data()[c * plane..(c + 1) * plane].iter().sum();
                }
                self.add_into(grads, *b, Tensor::new(vec![sx[0]], gb).expect("shape"));
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data();
                let ga = Tensor::new(
                    shape_of(*a),
                    gout.data().iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
                )
                .expect("shape");
                self.add_into(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = data_of(*a);
                let ga = Tensor::new(
                    shape_of(*a),
                    gout.data()
                        .iter()
                        .zip(x)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                )
                .expect("shape");
                self.add_into(grads, *a, ga);
            }
            Op::Sum(a) => {
                let g = gout.data()[0];
                self.add_into(grads, *a, Tensor::filled(shape_of(*a), g));
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel() as f64;
                let g = gout.data()[0] / n;
                self.add_into(grads, *a, Tensor::filled(shape_of(*a), g));
            }
            Op::Abs(a) => {
                let x = data_of(*a);
                let ga = Tensor::new(
                    shape_of(*a),
                    gout.data()
                        .iter()
                        .zip(x)
                        .map(|(g, v)| if *v >= 0.0 { *g } else { -*g })
                        .collect(),
                )
                .expect("shape");
                self.add_into(grads, *a, ga);
            }
            Op::Square(a) => {
                let x = data_of(*a);
                let ga = Tensor::new(
                    shape_of(*a),
                    gout.data().iter().zip(x).map(|(g, v)| 2.0 * g * v).collect(),
                )
                .expect("shape");
                self.add_into(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let y = self.nodes[idx].value.data();
                let ga = Tensor::new(
                    shape_of(*a),
                    gout.data()
                        .iter()
                        .zip(y)
                        .map(|(g, s)| if *s > 0.0 { g / (2.0 * s) } else { 0.0 })
                        .collect(),
                )
                .expect("shape");
                self.add_into(grads, *a, ga);
            }
            Op::Norm(a) => {
                // d|x|/dx = x / |x|; zero subgradient at the origin.
                let n = self.nodes[idx].value.data()[0];
                let g = gout.data()[0];
                let x = data_of(*a);
                let ga = if n > 0.0 {
                    Tensor::new(shape_of(*a), x.iter().map(|v| g * v / n).collect())
                        .expect("shape")
                } else {
                    Tensor::zeros(shape_of(*a))
                };
                self.add_into(grads, *a, ga);
            }
            Op::Softmax { a, axis } => {
                let y = self.nodes[idx].value.data();
                let (outer, len, inner) = axis_split(self.nodes[idx].value.shape(), *axis)
                    .expect("validated in forward");
                let dg = gout.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx_of = |k: usize| (o * len + k) * inner + i;
                        let mut dot = 0.0;
                        for k in 0..len {
                            dot += dg[idx_of(k)] * y[idx_of(k)];
                        }
                        for k in 0..len {
                            let ii = idx_of(k);
                            ga[ii] = y[ii] * (dg[ii] - dot);
                        }
                    }
                }
                self.add_into(grads, *a, Tensor::new(shape_of(*a), ga).expect("shape"));
            }
            Op::SumAxis { a, axis } => {
                let sa = shape_of(*a);
                let (outer, len, inner) = axis_split(&sa, *axis).expect("validated");
                let dg = gout.data();
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            ga[(o * len + k) * inner + i] = dg[o * inner + i];
                        }
                    }
                }
                self.add_into(grads, *a, Tensor::new(sa, ga).expect("shape"));
            }
            Op::Expand { a, axis, n } => {
                let sa = shape_of(*a);
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis..].iter().product();
                let dg = gout.data();
                let mut ga = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..*n {
                        for i in 0..inner {
                            ga[o * inner + i] += dg[(o * n + k) * inner + i];
                        }
                    }
                }
                self.add_into(grads, *a, Tensor::new(sa, ga).expect("shape"));
            }
            Op::Squash { a, axis } => {
                let s = data_of(*a);
                let (outer, len, inner) =
                    axis_split(self.nodes[*a].value.shape(), *axis).expect("validated");
                let dg = gout.data();
                let mut ga = vec![0.0; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx_of = |k: usize| (o * len + k) * inner + i;
                        let mut n2 = 0.0;
                        let mut dot = 0.0;
                        for k in 0..len {
                            let sv = s[idx_of(k)];
                            n2 += sv * sv;
                            dot += sv * dg[idx_of(k)];
                        }
                        let n = n2.sqrt();
                        // v = g(n) s, g = n / (1 + n^2);
                        // J = g I + (g'/n) s s^T, g' = (1 - n^2) / (1 + n^2)^2.
                        let g = n / (1.0 + n2);
                        let coeff = if n > 1e-12 {
                            (1.0 - n2) / ((1.0 + n2) * (1.0 + n2) * n)
                        } else {
                            0.0
                        };
                        for k in 0..len {
                            let ii = idx_of(k);
                            ga[ii] = g * dg[ii] + coeff * s[ii] * dot;
                        }
                    }
                }
                self.add_into(grads, *a, Tensor::new(shape_of(*a), ga).expect("shape"));
            }
            Op::CapsulePredict { w, u } => {
                let sw = shape_of(*w);
                let su = shape_of(*u);
                let (ni, nj, dout, din) = (sw[0], sw[1], sw[2], sw[3]);
                let p = su[2];
                let dw = data_of(*w);
                let du = data_of(*u);
                let dg = gout.data();
                let mut gw = vec![0.0; dw.len()];
                let mut gu = vec![0.0; du.len()];
                for i in 0..ni {
                    for j in 0..nj {
                        for d in 0..dout {
                            let obase = ((i * nj + j) * dout + d) * p;
                            for e in 0..din {
                                let wi = ((i * nj + j) * dout + d) * din + e;
                                let ubase = (i * din + e) * p;
                                let mut acc = 0.0;
                                for pos in 0..p {
                                    let g = dg[obase + pos];
                                    acc += g * du[ubase + pos];
                                    gu[ubase + pos] += g * dw[wi];
                                }
                                gw[wi] += acc;
                            }
                        }
                    }
                }
                self.add_into(grads, *w, Tensor::new(sw, gw).expect("shape"));
                self.add_into(grads, *u, Tensor::new(su, gu).expect("shape"));
            }
            Op::Upsample2x(a) => {
                let sa = shape_of(*a);
                let (c, h, w) = (sa[0], sa[1], sa[2]);
                let dg = gout.data();
                let mut ga = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            ga[(ch * h + y / 2) * w + x / 2] +=
                                dg[(ch * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                self.add_into(grads, *a, Tensor::new(sa, ga).expect("shape"));
            }
            Op::Reshape(a) => {
                let ga = gout.reshaped(shape_of(*a)).expect("element counts match");
                self.add_into(grads, *a, ga);
            }
            Op::BilinearSample { img, coords_x, coords_y } => {
                let si = shape_of(*img);
                let (h, w) = (si[0], si[1]);
                let data = data_of(*img);
                let cx = data_of(*coords_x);
                let cy = data_of(*coords_y);
                let dg = gout.data();
                let mut gimg = vec![0.0; h * w];
                let mut gx = vec![0.0; cx.len()];
                let mut gy = vec![0.0; cy.len()];
                for i in 0..cx.len() {
                    let g = dg[i];
                    let u = cx[i].clamp(0.0, w as f64 - 1.0);
                    let v = cy[i].clamp(0.0, h as f64 - 1.0);
                    let x0 = u.floor() as usize;
                    let y0 = v.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let ax = u - x0 as f64;
                    let ay = v - y0 as f64;
                    gimg[y0 * w + x0] += g * (1.0 - ax) * (1.0 - ay);
                    gimg[y0 * w + x1] += g * ax * (1.0 - ay);
                    gimg[y1 * w + x0] += g * (1.0 - ax) * ay;
                    gimg[y1 * w + x1] += g * ax * ay;
                    // Coordinate gradients vanish where the clamp is active.
                    if cx[i] > 0.0 && cx[i] < w as f64 - 1.0 {
                        let d_du = (1.0 - ay) * (data[y0 * w + x1] - data[y0 * w + x0])
                            + ay * (data[y1 * w + x1] - data[y1 * w + x0]);
                        gx[i] = g * d_du;
                    }
                    if cy[i] > 0.0 && cy[i] < h as f64 - 1.0 {
                        let d_dv = (1.0 - ax) * (data[y1 * w + x0] - data[y0 * w + x0])
                            + ax * (data[y1 * w + x1] - data[y0 * w + x1]);
                        gy[i] = g * d_dv;
                    }
                }
                self.add_into(grads, *img, Tensor::new(si, gimg).expect("shape"));
                self.add_into(
                    grads,
                    *coords_x,
                    Tensor::new(shape_of(*coords_x), gx).expect("shape"),
                );
                self.add_into(
                    grads,
                    *coords_y,
                    Tensor::new(shape_of(*coords_y), gy).expect("shape"),
                );
            }
        }
    }
}
