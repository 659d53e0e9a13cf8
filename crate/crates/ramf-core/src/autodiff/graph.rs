use super::kernels;
use super::optim::{ParamId, Parameter};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Guard for row normalization: rows with a smaller norm are divided by
/// this constant instead, keeping forward and backward finite. Feature and
/// head-weight norms in practice sit many orders of magnitude above it.
const NORM_GUARD: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    MulScalarVar { x: Var, s: Var },
    Relu(Var),
    /// Forward identical to relu, backward negated. Exists solely as the
    /// negative control for the gradient-check harness.
    ReluNegatedFixture(Var),
    Conv2d { input: Var, kernel: Var, padding: usize },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    AvgPool2(Var),
    Flatten(Var),
    NormalizeRows(Var),
    NarrowRows { x: Var, start: usize, len: usize },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, softmax: Tensor },
    RowNormMean(Var),
    DotConst { x: Var, weights: Tensor },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use reverse-mode tape. Operations evaluate eagerly; `backward`
/// fills gradients for every node that (transitively) depends on a
/// gradient-tracked leaf.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound_params: Vec<(ParamId, Var)>,
    overrides: Vec<(ParamId, Var)>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Untracked leaf (network input or any other constant).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, false)
    }

    /// Untracked leaf taking ownership of the tensor.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Gradient-tracked leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Bind a parameter as a gradient-tracked leaf. If an override was
    /// registered for this parameter the override var is returned instead;
    /// the gradient checker uses that to substitute a probe point.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&(_, v)) = self.overrides.iter().find(|(id, _)| *id == p.id()) {
            return v;
        }
        let v = self.push(p.value().clone(), Op::Leaf, true);
        self.bound_params.push((p.id(), v));
        v
    }

    pub fn override_param(&mut self, id: ParamId, v: Var) {
        self.overrides.push((id, v));
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after `backward`; `None` when nothing flowed there.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulate this graph's gradient for `p` into `p.grad`.
    pub fn add_grad_to(&self, p: &mut Parameter) -> Result<()> {
        for &(id, v) in &self.bound_params {
            if id == p.id() {
                if let Some(g) = self.grad(v) {
                    p.grad_mut().add_assign(g)?;
                }
            }
        }
        Ok(())
    }

    // ── elementwise / scalar ops ────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        out.add_assign(tb)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "sub: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = Tensor::lerp(1.0, ta, -1.0, tb)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "hadamard: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Hadamard(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scaled(c);
        let rg = self.requires(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Broadcast-multiply a tensor by a one-element variable (the learnable
    /// softmax temperature).
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape(format!(
                "mul_scalar_var: scalar operand has shape {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(x).scaled(sv);
        let rg = self.requires(x) || self.requires(s);
        Ok(self.push(out, Op::MulScalarVar { x, s }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.requires(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Negative-control op: relu forward, negated backward. Used by the
    /// self-check suite to prove the gradient checker catches a broken layer.
    pub fn relu_negated_backward_fixture(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.requires(x);
        self.push(out, Op::ReluNegatedFixture(x), rg)
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// Cross-correlation of [n,c,h,w] input with [f,c,k,k] kernel under
    /// symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (f, kc, kh, kw) = self.value(kernel).dims4()?;
        if kh != kw {
            return Err(Error::Shape(format!("conv2d: non-square kernel {kh}x{kw}")));
        }
        let k = kh;
        if kc != cin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels, kernel expects {kc}"
            )));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d: kernel {k} exceeds padded extent {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = h + 2 * padding - k + 1;
        let ow = w + 2 * padding - k + 1;
        let ckk = cin * k * k;

        let mut out = vec![0.0; n * f * oh * ow];
        let mut col_t = vec![0.0; ckk * oh * ow];
        {
            let x = self.value(input).data();
            let kflat = self.value(kernel).data();
            for s in 0..n {
                let img = &x[s * cin * h * w..(s + 1) * cin * h * w];
                kernels::im2col_t(img, cin, h, w, k, padding, oh, ow, &mut col_t);
                let res = kernels::matmul(kflat, f, ckk, &col_t, oh * ow);
                out[s * f * oh * ow..(s + 1) * f * oh * ow].copy_from_slice(&res);
            }
        }
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        let rg = self.requires(input) || self.requires(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                padding,
            },
            rg,
        ))
    }

    /// Affine map of [n,d_in] by weight [d_out,d_in] and optional bias [d_out].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(input).dims2()?;
        let (dout, win) = self.value(weight).dims2()?;
        if din != win {
            return Err(Error::Shape(format!(
                "linear: input dim {din} vs weight dim {win}"
            )));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [dout] {
                return Err(Error::Shape(format!(
                    "linear: bias shape {bs:?}, expected [{dout}]"
                )));
            }
        }
        let mut out = kernels::matmul_bt(
            self.value(input).data(),
            n,
            din,
            self.value(weight).data(),
            dout,
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(vec![n, dout], out)?;
        let rg = self.requires(input)
            || self.requires(weight)
            || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Non-overlapping 2x2 mean pooling; spatial extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2: odd spatial extent {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let ip = &src[plane * h * w..(plane + 1) * h * w];
            let op_ = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let base = 2 * i * w + 2 * j;
                    op_[i * ow + j] =
                        0.25 * (ip[base] + ip[base + 1] + ip[base + w] + ip[base + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::AvgPool2(x), rg))
    }

    /// Collapse all trailing dimensions: [n, ...] -> [n, prod(...)].
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("flatten: rank {} < 2", shape.len())));
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let value = self.value(x).clone().reshaped(vec![n, rest])?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::Flatten(x), rg))
    }

    /// L2-normalize each row of a [rows, cols] matrix.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_GUARD);
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::NormalizeRows(x), rg))
    }

    /// Mean over the batch of -log softmax(logits)[target].
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: {n} rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy: target {bad} out of range for {k} classes"
            )));
        }
        let softmax = softmax_rows(self.value(logits))?;
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let p = softmax.data()[r * k + t];
            loss -= p.max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
            rg,
        ))
    }

    /// Mean over rows of the per-row Euclidean norm of a [rows, cols] matrix.
    pub fn row_norm_mean(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut acc = 0.0;
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            acc += row.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let value = Tensor::scalar(acc / rows as f64);
        let rg = self.requires(x);
        Ok(self.push(value, Op::RowNormMean(x), rg))
    }

    /// Scalar contraction against a fixed weight tensor; turns any node into
    /// a scalar for gradient checking.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "dot_const: {:?} vs {:?}",
                self.value(x).shape(),
                weights.shape()
            )));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.requires(x);
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Leaf gradients stay queryable
    /// via [`Graph::grad`]; interior gradients are dropped once consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss has shape {:?}, expected a scalar",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // loss does not depend on any tracked leaf
        }
        self.grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // leaf grads stay stored for querying
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, update: impl FnOnce(&mut Tensor) -> Result<()>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let slot = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
        // Split the borrow: take the tensor out, update, put back.
        let mut t = std::mem::replace(slot, Tensor::scalar(0.0));
        update(&mut t)?;
        self.grads[v.0] = Some(t);
        Ok(())
    }

    fn propagate(&mut self, node: usize, g: &Tensor) -> Result<()> {
        // Ops own no large state except the cached softmax, so matching on a
        // shallow copy of the input vars keeps the borrow checker happy.
        match &self.nodes[node].op {
            Op::Leaf => Ok(()),
            &Op::Add(a, b) => {
                self.accum(a, |t| t.add_assign(g))?;
                self.accum(b, |t| t.add_assign(g))
            }
            &Op::Sub(a, b) => {
                self.accum(a, |t| t.add_assign(g))?;
                self.accum(b, |t| t.add_scaled(-1.0, g))
            }
            &Op::Hadamard(a, b) => {
                let da: Vec<f64> = self
                    .value(b)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, y)| x * y)
                    .collect();
                let delta_a = Tensor::new(g.shape().to_vec(), da)?;
                self.accum(a, |t| t.add_assign(&delta_a))?;
                let db: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, y)| x * y)
                    .collect();
                let delta_b = Tensor::new(g.shape().to_vec(), db)?;
                self.accum(b, |t| t.add_assign(&delta_b))
            }
            &Op::Scale(x, c) => self.accum(x, |t| t.add_scaled(c, g)),
            &Op::MulScalarVar { x, s } => {
                let sv = self.value(s).data()[0];
                self.accum(x, |t| t.add_scaled(sv, g))?;
                let ds: f64 = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| a * b)
                    .sum();
                self.accum(s, |t| {
                    t.data_mut()[0] += ds;
                    Ok(())
                })
            }
            &Op::Relu(x) => {
                let mask: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                let delta = Tensor::new(self.value(x).shape().to_vec(), mask)?;
                self.accum(x, |t| t.add_assign(&delta))
            }
            &Op::ReluNegatedFixture(x) => {
                let mask: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { -gv } else { 0.0 })
                    .collect();
                let delta = Tensor::new(self.value(x).shape().to_vec(), mask)?;
                self.accum(x, |t| t.add_assign(&delta))
            }
            &Op::Conv2d {
                input,
                kernel,
                padding,
            } => self.conv2d_backward(input, kernel, padding, g),
            &Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, dout) = g.dims2()?;
                let din = self.value(input).dims2()?.1;
                if self.requires(input) {
                    let gx = kernels::matmul(g.data(), n, dout, self.value(weight).data(), din);
                    let delta = Tensor::new(vec![n, din], gx)?;
                    self.accum(input, |t| t.add_assign(&delta))?;
                }
                if self.requires(weight) {
                    let gw = kernels::matmul_at(g.data(), n, dout, self.value(input).data(), din);
                    let delta = Tensor::new(vec![dout, din], gw)?;
                    self.accum(weight, |t| t.add_assign(&delta))?;
                }
                if let Some(b) = bias {
                    if self.requires(b) {
                        let mut gb = vec![0.0; dout];
                        for row in g.data().chunks_exact(dout) {
                            for (s, v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        let delta = Tensor::new(vec![dout], gb)?;
                        self.accum(b, |t| t.add_assign(&delta))?;
                    }
                }
                Ok(())
            }
            &Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let gp = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let xp = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let q = 0.25 * gp[i * ow + j];
                            let base = 2 * i * w + 2 * j;
                            xp[base] += q;
                            xp[base + 1] += q;
                            xp[base + w] += q;
                            xp[base + w + 1] += q;
                        }
                    }
                }
                let delta = Tensor::new(vec![n, c, h, w], gx)?;
                self.accum(x, |t| t.add_assign(&delta))
            }
            &Op::Flatten(x) => {
                let shape = self.value(x).shape().to_vec();
                let delta = g.clone().reshaped(shape)?;
                self.accum(x, |t| t.add_assign(&delta))
            }
            &Op::NormalizeRows(x) => {
                let (rows, cols) = self.value(x).dims2()?;
                let src = self.value(x).data();
                let y = self.nodes[node].value.data();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let xr = &src[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let out = &mut gx[r * cols..(r + 1) * cols];
                    if norm >= NORM_GUARD {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = (gv - dot * yv) / norm;
                        }
                    } else {
                        for (o, &gv) in out.iter_mut().zip(gr) {
                            *o = gv / NORM_GUARD;
                        }
                    }
                }
                let delta = Tensor::new(vec![rows, cols], gx)?;
                self.accum(x, |t| t.add_assign(&delta))
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                softmax,
            } => {
                let logits = *logits;
                let seed = g.data()[0];
                let (n, k) = softmax.dims2()?;
                let mut gl = softmax.data().to_vec();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * k + t] -= 1.0;
                }
                let scale = seed / n as f64;
                gl.iter_mut().for_each(|v| *v *= scale);
                let delta = Tensor::new(vec![n, k], gl)?;
                self.accum(logits, |t| t.add_assign(&delta))
            }
            &Op::RowNormMean(x) => {
                let seed = g.data()[0];
                let (rows, cols) = self.value(x).dims2()?;
                let src = self.value(x).data();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let xr = &src[r * cols..(r + 1) * cols];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        // subgradient 0 at the origin
                        let c = seed / (rows as f64 * norm);
                        for (o, &xv) in gx[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
                            *o = c * xv;
                        }
                    }
                }
                let delta = Tensor::new(vec![rows, cols], gx)?;
                self.accum(x, |t| t.add_assign(&delta))
            }
            Op::DotConst { x, weights } => {
                let x = *x;
                let seed = g.data()[0];
                let delta = weights.scaled(seed);
                self.accum(x, |t| t.add_assign(&delta))
            }
            &Op::Sum(x) => {
                let seed = g.data()[0];
                let mut delta = Tensor::zeros(self.value(x).shape().to_vec());
                delta.fill(seed);
                self.accum(x, |t| t.add_assign(&delta))
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        input: Var,
        kernel: Var,
        padding: usize,
        g: &Tensor,
    ) -> Result<()> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (f, _, k, _) = self.value(kernel).dims4()?;
        let (_, _, oh, ow) = g.dims4()?;
        let ckk = cin * k * k;
        let need_input = self.requires(input);
        let need_kernel = self.requires(kernel);

        let mut gk = vec![0.0; f * ckk];
        let mut gi = vec![0.0; n * cin * h * w];
        let mut col_t = vec![0.0; ckk * oh * ow];
        {
            let x = self.value(input).data();
            let kflat = self.value(kernel).data();
            for s in 0..n {
                let gs = &g.data()[s * f * oh * ow..(s + 1) * f * oh * ow];
                if need_kernel {
                    let img = &x[s * cin * h * w..(s + 1) * cin * h * w];
                    kernels::im2col_t(img, cin, h, w, k, padding, oh, ow, &mut col_t);
                    let part = kernels::matmul_bt(gs, f, oh * ow, &col_t, ckk);
                    for (a, b) in gk.iter_mut().zip(&part) {
                        *a += b;
                    }
                }
                if need_input {
                    let gcol = kernels::matmul_at(kflat, f, ckk, gs, oh * ow);
                    kernels::col2im_t_add(
                        &gcol,
                        cin,
                        h,
                        w,
                        k,
                        padding,
                        oh,
                        ow,
                        &mut gi[s * cin * h * w..(s + 1) * cin * h * w],
                    );
                }
            }
        }
        if need_kernel {
            let delta = Tensor::new(vec![f, cin, k, k], gk)?;
            self.accum(kernel, |t| t.add_assign(&delta))?;
        }
        if need_input {
            let delta = Tensor::new(vec![n, cin, h, w], gi)?;
            self.accum(input, |t| t.add_assign(&delta))?;
        }
        Ok(())
    }
}

/// Row-wise softmax of a [rows, cols] matrix (max-shifted for stability).
#[allow(clippy::needless_range_loop)]
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (rows, cols) = logits.dims2()?;
    let src = logits.data();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::NonFinite("softmax over non-finite logits".into()));
        }
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let k = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let y = g.conv2d(x, k, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = rand_tensor(vec![2, 1, 4, 4], &mut rng);
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0; // center delta
        let mut g = Graph::new();
        let x = g.input(&img);
        let k = g.constant(Tensor::new(vec![1, 1, 3, 3], kdata).unwrap());
        let y = g.conv2d(x, k, 1).unwrap();
        assert_eq!(g.value(y).data(), img.data());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 2, 4, 4]));
        let k = g.constant(Tensor::ones(vec![1, 3, 3, 3]));
        assert!(g.conv2d(x, k, 1).is_err());
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = rand_tensor(vec![2, 3, 5, 5], &mut rng);
        let kernel = rand_tensor(vec![4, 3, 3, 3], &mut rng);
        let probe = rand_tensor(vec![2, 4, 5, 5], &mut rng);

        // gradient w.r.t. the input
        let (kc, pc) = (kernel.clone(), probe.clone());
        let err = grad_check(
            move |g, v| {
                let k = g.input(&kc);
                let y = g.conv2d(v, k, 1)?;
                g.dot_const(y, pc.clone())
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "conv2d input grad error {err}");

        // gradient w.r.t. the kernel
        let (ic, pc) = (input.clone(), probe.clone());
        let err = grad_check(
            move |g, v| {
                let x = g.input(&ic);
                let y = g.conv2d(x, v, 1)?;
                g.dot_const(y, pc.clone())
            },
            &kernel,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "conv2d kernel grad error {err}");
    }

    #[test]
    fn conv2d_is_linear_in_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(vec![1, 2, 6, 6], &mut rng);
        let b = rand_tensor(vec![1, 2, 6, 6], &mut rng);
        let kernel = rand_tensor(vec![3, 2, 3, 3], &mut rng);
        let run = |img: &Tensor| {
            let mut g = Graph::new();
            let x = g.input(img);
            let k = g.input(&kernel);
            let y = g.conv2d(x, k, 1).unwrap();
            g.value(y).clone()
        };
        let mixed = Tensor::lerp(2.5, &a, -1.5, &b).unwrap();
        let lhs = run(&mixed);
        let rhs = Tensor::lerp(2.5, &run(&a), -1.5, &run(&b)).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_identity_and_affine_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        // weight [[1,2]], input [3,4], bias [1] -> [12]
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[12.0]);
    }

    #[test]
    fn linear_rejects_dimension_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![2, 3]));
        let w = g.constant(Tensor::ones(vec![4, 5]));
        assert!(g.linear(x, w, None).is_err());
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(vec![3, 4], &mut rng);
        let w = rand_tensor(vec![2, 4], &mut rng);
        let b = rand_tensor(vec![2], &mut rng);
        let probe = rand_tensor(vec![3, 2], &mut rng);

        for target in ["input", "weight", "bias"] {
            let (xc, wc, bc, pc) = (x.clone(), w.clone(), b.clone(), probe.clone());
            let point = match target {
                "input" => x.clone(),
                "weight" => w.clone(),
                _ => b.clone(),
            };
            let err = grad_check(
                move |g, v| {
                    let xi = if target == "input" { v } else { g.input(&xc) };
                    let wi = if target == "weight" { v } else { g.input(&wc) };
                    let bi = if target == "bias" { v } else { g.input(&bc) };
                    let y = g.linear(xi, wi, Some(bi))?;
                    g.dot_const(y, pc.clone())
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "linear {target} grad error {err}");
        }
    }

    #[test]
    fn relu_examples_and_idempotence() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let yy = g.relu(y);
        assert_eq!(g.value(yy).data(), g.value(y).data());
    }

    #[test]
    fn relu_gradient_away_from_zero() {
        // inputs bounded away from 0 so central differences never straddle
        // the kink
        let point = Tensor::new(vec![6], vec![-2.0, -0.7, -0.1, 0.1, 0.9, 3.0]).unwrap();
        let probe = Tensor::new(vec![6], vec![0.3, -1.2, 2.0, 0.5, -0.8, 1.1]).unwrap();
        let err = grad_check(
            move |g, v| {
                let y = g.relu(v);
                g.dot_const(y, probe.clone())
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relu grad error {err}");
    }

    #[test]
    fn avg_pool_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let mut g = Graph::new();
        let c = g.constant(Tensor::new(vec![1, 2, 4, 4], vec![0.7; 32]).unwrap());
        let y = g.avg_pool2(c).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let mut g = Graph::new();
        let odd = g.constant(Tensor::ones(vec![1, 1, 3, 4]));
        assert!(g.avg_pool2(odd).is_err(), "odd spatial extent");
    }

    #[test]
    fn avg_pool_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(vec![2, 2, 4, 4], &mut rng);
        let probe = rand_tensor(vec![2, 2, 2, 2], &mut rng);
        let err = grad_check(
            move |g, v| {
                let y = g.avg_pool2(v)?;
                g.dot_const(y, probe.clone())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "avg_pool grad error {err}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![3, 5]));
        let loss = g.softmax_cross_entropy(logits, &[0, 2, 4]).unwrap();
        let expected = 5.0f64.ln();
        assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logit_drives_loss_to_zero() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap());
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(g.value(loss).item().unwrap() < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![2, 4]));
        assert!(g.softmax_cross_entropy(logits, &[0, 4]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = rand_tensor(vec![4, 6], &mut rng);
        let targets = [5usize, 0, 3, 3];

        let mut g = Graph::new();
        let lv = g.leaf(&logits);
        let loss = g.softmax_cross_entropy(lv, &targets).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(lv).unwrap();

        let sm = softmax_rows(&logits).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                let mut expect = sm.data()[r * 6 + c];
                if targets[r] == c {
                    expect -= 1.0;
                }
                expect /= 4.0;
                assert!((grad.data()[r * 6 + c] - expect).abs() < 1e-12);
            }
        }

        let err = grad_check(
            move |g, v| g.softmax_cross_entropy(v, &targets),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "cross-entropy fd error {err}");
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let t = rand_tensor(vec![5, 9], &mut rng);
            let sm = softmax_rows(&t).unwrap();
            for r in 0..5 {
                let row = sm.row(r).unwrap();
                assert!(row.iter().all(|&p| p >= 0.0));
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
            }
        }
    }

    #[test]
    fn normalize_rows_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = rand_tensor(vec![3, 5], &mut rng);
        let probe = rand_tensor(vec![3, 5], &mut rng);
        let err = grad_check(
            move |g, v| {
                let y = g.normalize_rows(v)?;
                g.dot_const(y, probe.clone())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "normalize_rows grad error {err}");
    }

    #[test]
    fn row_norm_mean_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap());
        let y = g.row_norm_mean(x).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rand_tensor(vec![4, 6], &mut rng);
        let err = grad_check(move |g, v| g.row_norm_mean(v), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "row_norm_mean grad error {err}");
    }

    #[test]
    fn mul_scalar_var_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = rand_tensor(vec![3, 3], &mut rng);
        let s = Tensor::scalar(1.7);
        let probe = rand_tensor(vec![3, 3], &mut rng);

        let (sc, pc) = (s.clone(), probe.clone());
        let err = grad_check(
            move |g, v| {
                let sv = g.input(&sc);
                let y = g.mul_scalar_var(v, sv)?;
                g.dot_const(y, pc.clone())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "mul_scalar_var x grad error {err}");

        let xc = x.clone();
        let err = grad_check(
            move |g, v| {
                let xv = g.input(&xc);
                let y = g.mul_scalar_var(xv, v)?;
                g.dot_const(y, probe.clone())
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "mul_scalar_var s grad error {err}");
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = rand_tensor(vec![2, 3, 8, 8], &mut rng);
        let kernel = rand_tensor(vec![4, 3, 3, 3], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let x = g.input(&img);
            let k = g.input(&kernel);
            let c = g.conv2d(x, k, 1).unwrap();
            let r = g.relu(c);
            let p = g.avg_pool2(r).unwrap();
            let f = g.flatten(p).unwrap();
            g.value(f).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn param_binding_accumulates_gradients() {
        let w = Parameter::new(Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap());
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let wv = g.param(&w);
        let y = g.linear(x, wv, None).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let mut w = w;
        g.add_grad_to(&mut w).unwrap();
        assert_eq!(w.grad().data(), &[3.0, 4.0]);
    }

    #[test]
    fn override_substitutes_probe_point() {
        let w = Parameter::new(Tensor::scalar(5.0));
        let mut g = Graph::new();
        let replacement = g.leaf(&Tensor::scalar(2.0));
        g.override_param(w.id(), replacement);
        let bound = g.param(&w);
        assert_eq!(g.value(bound).data(), &[2.0]);
    }
}
