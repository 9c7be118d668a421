//! A small reverse-mode differentiation tape over channel-major tensors.
//!
//! Operations are recorded together with their forward values. Parameters
//! live in a flat `theta` slice owned by the caller; layers refer to them by
//! offset. `backward` returns the gradient with respect to all of `theta`,
//! `replay` recomputes the forward values from the recorded inputs.

use crate::error::{Error, Result};

/// `channels x height x width`, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            channels: n,
            height: 1,
            width: 1,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn same_dims(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Dense {
        x: Var,
        weight: usize,
        bias: usize,
        out: usize,
    },
    Conv3x3 {
        x: Var,
        weight: usize,
        bias: usize,
        out: usize,
    },
    Silu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    AppendChannel {
        x: Var,
        value: f64,
    },
    Add(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    // false for pure functions of inputs; their adjoints are never needed
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_len: usize,
}

impl Tape {
    pub fn new(param_len: usize) -> Self {
        Tape {
            nodes: Vec::new(),
            param_len,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value: t,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<Var> {
        let idx = self.nodes.len();
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: idx });
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(idx))
    }

    fn check_params(&self, theta: &[f64], end: usize) -> Result<()> {
        if theta.len() != self.param_len || end > self.param_len {
            return Err(Error::Dimension(format!(
                "parameter slice of length {} (tape expects {}, layer needs {end})",
                theta.len(),
                self.param_len
            )));
        }
        Ok(())
    }

    /// `y = W x + b` with `W` stored row-major as `out x in` at `weight`.
    pub fn dense(
        &mut self,
        theta: &[f64],
        x: Var,
        weight: usize,
        bias: usize,
        out: usize,
    ) -> Result<Var> {
        let n_in = self.value(x).len();
        self.check_params(theta, (weight + out * n_in).max(bias + out))?;
        let op = Op::Dense {
            x,
            weight,
            bias,
            out,
        };
        let value = self.eval(&op, theta)?;
        self.push(op, value, true)
    }

    /// 3x3 convolution, stride 1, zero padding of 1. Weights are
    /// `out x in x 3 x 3` at `weight`.
    pub fn conv3x3(
        &mut self,
        theta: &[f64],
        x: Var,
        weight: usize,
        bias: usize,
        out: usize,
    ) -> Result<Var> {
        let k = self.value(x).channels * 9;
        self.check_params(theta, (weight + out * k).max(bias + out))?;
        let op = Op::Conv3x3 {
            x,
            weight,
            bias,
            out,
        };
        let value = self.eval(&op, theta)?;
        self.push(op, value, true)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Silu(x), x)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.height % 2 != 0 || t.width % 2 != 0 {
            return Err(Error::Dimension(format!(
                "avg_pool2 needs even spatial size, got {}x{}",
                t.height, t.width
            )));
        }
        self.unary(Op::AvgPool2(x), x)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Upsample2(x), x)
    }

    /// Appends a constant channel (a broadcast scalar feature).
    pub fn append_channel(&mut self, x: Var, value: f64) -> Result<Var> {
        self.unary(Op::AppendChannel { x, value }, x)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.height != tb.height || ta.width != tb.width {
            return Err(Error::Dimension(format!(
                "concat: {}x{} vs {}x{}",
                ta.height, ta.width, tb.height, tb.width
            )));
        }
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let op = Op::Concat(a, b);
        let value = self.eval(&op, &[])?;
        self.push(op, value, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.value(a).same_dims(self.value(b)) {
            return Err(Error::Dimension("add: operand shapes differ".into()));
        }
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let op = Op::Add(a, b);
        let value = self.eval(&op, &[])?;
        self.push(op, value, needs)
    }

    fn unary(&mut self, op: Op, x: Var) -> Result<Var> {
        let needs = self.nodes[x.0].needs_grad;
        let value = self.eval(&op, &[])?;
        self.push(op, value, needs)
    }

    fn eval(&self, op: &Op, theta: &[f64]) -> Result<Tensor> {
        self.eval_with(op, theta, |v| &self.nodes[v.0].value)
    }

    fn eval_with<'a>(
        &self,
        op: &Op,
        theta: &[f64],
        get: impl Fn(Var) -> &'a Tensor,
    ) -> Result<Tensor> {
        Ok(match *op {
            Op::Input => unreachable!("inputs are not evaluated"),
            Op::Dense {
                x,
                weight,
                bias,
                out,
            } => dense_forward(get(x), &theta[weight..], &theta[bias..bias + out], out),
            Op::Conv3x3 {
                x,
                weight,
                bias,
                out,
            } => conv3x3_forward(get(x), &theta[weight..], &theta[bias..bias + out], out),
            Op::Silu(x) => {
                let t = get(x);
                Tensor {
                    data: t.data.iter().map(|&v| v * sigmoid(v)).collect(),
                    ..t.clone()
                }
            }
            Op::AvgPool2(x) => avg_pool2_forward(get(x)),
            Op::Upsample2(x) => upsample2_forward(get(x)),
            Op::Concat(a, b) => {
                let (ta, tb) = (get(a), get(b));
                let mut data = Vec::with_capacity(ta.len() + tb.len());
                data.extend_from_slice(&ta.data);
                data.extend_from_slice(&tb.data);
                Tensor {
                    channels: ta.channels + tb.channels,
                    height: ta.height,
                    width: ta.width,
                    data,
                }
            }
            Op::AppendChannel { x, value } => {
                let t = get(x);
                let mut data = Vec::with_capacity(t.len() + t.plane());
                data.extend_from_slice(&t.data);
                data.resize(t.len() + t.plane(), value);
                Tensor {
                    channels: t.channels + 1,
                    height: t.height,
                    width: t.width,
                    data,
                }
            }
            Op::Add(a, b) => {
                let (ta, tb) = (get(a), get(b));
                Tensor {
                    data: ta.data.iter().zip(&tb.data).map(|(p, q)| p + q).collect(),
                    ..ta.clone()
                }
            }
        })
    }

    /// Recomputes every node from the recorded inputs with parameters `theta`.
    pub fn replay(&self, theta: &[f64], output: Var) -> Result<Tensor> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if theta.len() != self.param_len {
            return Err(Error::Dimension(format!(
                "replay with {} parameters, tape expects {}",
                theta.len(),
                self.param_len
            )));
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Input => node.value.clone(),
                ref op => {
                    let v = self.eval_with(op, theta, |var| &values[var.0])?;
                    if v.data.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite { layer: idx });
                    }
                    v
                }
            };
            values.push(v);
            if idx == output.0 {
                break;
            }
        }
        Ok(values.swap_remove(output.0))
    }

    /// Gradient of `<seed, output>` with respect to `theta`.
    pub fn backward(&self, theta: &[f64], output: Var, seed: &Tensor) -> Result<Vec<f64>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if theta.len() != self.param_len {
            return Err(Error::Dimension(format!(
                "backward with {} parameters, tape expects {}",
                theta.len(),
                self.param_len
            )));
        }
        if output.0 >= self.nodes.len() || !self.nodes[output.0].value.same_dims(seed) {
            return Err(Error::Dimension("seed does not match the output node".into()));
        }
        let mut grad = vec![0.0; self.param_len];
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.data.clone());

        for idx in (0..=output.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Input => {}
                Op::Dense {
                    x,
                    weight,
                    bias,
                    out,
                } => {
                    let xv = &self.nodes[x.0].value.data;
                    let n_in = xv.len();
                    for o in 0..out {
                        let d = dy[o];
                        grad[bias + o] += d;
                        let row = &mut grad[weight + o * n_in..weight + (o + 1) * n_in];
                        for (g, xi) in row.iter_mut().zip(xv) {
                            *g += d * xi;
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; n_in];
                        for o in 0..out {
                            let d = dy[o];
                            let row = &theta[weight + o * n_in..weight + (o + 1) * n_in];
                            for (g, w) in dx.iter_mut().zip(row) {
                                *g += d * w;
                            }
                        }
                        accumulate(&mut adj, x, dx);
                    }
                }
                Op::Conv3x3 {
                    x,
                    weight,
                    bias,
                    out,
                } => {
                    let xt = &self.nodes[x.0].value;
                    let dx = conv3x3_backward(
                        xt,
                        &theta[weight..weight + out * xt.channels * 9],
                        &dy,
                        out,
                        &mut grad[weight..weight + out * xt.channels * 9],
                        self.nodes[x.0].needs_grad,
                    );
                    let hw = xt.plane();
                    for o in 0..out {
                        grad[bias + o] += dy[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut adj, x, dx);
                    }
                }
                Op::Silu(x) => {
                    if self.nodes[x.0].needs_grad {
                        let xv = &self.nodes[x.0].value.data;
                        let dx = xv
                            .iter()
                            .zip(&dy)
                            .map(|(&v, d)| {
                                let s = sigmoid(v);
                                d * (s + v * s * (1.0 - s))
                            })
                            .collect();
                        accumulate(&mut adj, x, dx);
                    }
                }
                Op::AvgPool2(x) => {
                    if self.nodes[x.0].needs_grad {
                        let xt = &self.nodes[x.0].value;
                        accumulate(&mut adj, x, avg_pool2_backward(xt, &dy));
                    }
                }
                Op::Upsample2(x) => {
                    if self.nodes[x.0].needs_grad {
                        let xt = &self.nodes[x.0].value;
                        accumulate(&mut adj, x, upsample2_backward(xt, &dy));
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a.0].value.len();
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, a, dy[..na].to_vec());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, b, dy[na..].to_vec());
                    }
                }
                Op::AppendChannel { x, .. } => {
                    if self.nodes[x.0].needs_grad {
                        let n = self.nodes[x.0].value.len();
                        accumulate(&mut adj, x, dy[..n].to_vec());
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, a, dy.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, b, dy);
                    }
                }
            }
        }
        Ok(grad)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(d),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dense_forward(x: &Tensor, weight: &[f64], bias: &[f64], out: usize) -> Tensor {
    let n_in = x.len();
    let data = (0..out)
        .map(|o| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            bias[o] + row.iter().zip(&x.data).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect();
    Tensor::vector(data)
}

/// Unfolds 3x3 neighbourhoods into a `(channels*9) x (h*w)` matrix.
fn im2col(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.channels, x.height, x.width);
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xx] = src[sy * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        let dst = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sy * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `C (m x n) = alpha * A (m x k) * B (k x n) + beta * C`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    // SAFETY: the strides passed by callers address only elements inside
    // `a` (m x k) and `b` (k x n); `c` is dense m x n as asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv3x3_forward(x: &Tensor, weight: &[f64], bias: &[f64], out: usize) -> Tensor {
    let hw = x.plane();
    let k = x.channels * 9;
    let cols = im2col(x);
    let mut data = vec![0.0; out * hw];
    for (o, b) in bias.iter().enumerate() {
        data[o * hw..(o + 1) * hw].fill(*b);
    }
    gemm(
        out,
        k,
        hw,
        &weight[..out * k],
        (k as isize, 1),
        &cols,
        (hw as isize, 1),
        1.0,
        &mut data,
    );
    Tensor {
        channels: out,
        height: x.height,
        width: x.width,
        data,
    }
}

/// Accumulates the weight gradient into `dweight`; returns the input gradient if requested.
fn conv3x3_backward(
    x: &Tensor,
    weight: &[f64],
    dy: &[f64],
    out: usize,
    dweight: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let hw = x.plane();
    let k = x.channels * 9;
    let cols = im2col(x);
    // dW (out x k) += dY (out x hw) * cols^T (hw x k)
    gemm(
        out,
        hw,
        k,
        dy,
        (hw as isize, 1),
        &cols,
        (1, hw as isize),
        1.0,
        dweight,
    );
    if !want_dx {
        return None;
    }
    // dcols (k x hw) = W^T (k x out) * dY (out x hw)
    let mut dcols = vec![0.0; k * hw];
    gemm(
        k,
        out,
        hw,
        weight,
        (1, k as isize),
        dy,
        (hw as isize, 1),
        0.0,
        &mut dcols,
    );
    Some(col2im(&dcols, x.channels, x.height, x.width))
}

fn avg_pool2_forward(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.height / 2, x.width / 2);
    let mut data = Vec::with_capacity(x.channels * h2 * w2);
    for c in 0..x.channels {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.width + 2 * xx;
                data.push(0.25 * (src[i] + src[i + 1] + src[i + x.width] + src[i + x.width + 1]));
            }
        }
    }
    Tensor {
        channels: x.channels,
        height: h2,
        width: w2,
        data,
    }
}

fn avg_pool2_backward(x: &Tensor, dy: &[f64]) -> Vec<f64> {
    let (h2, w2) = (x.height / 2, x.width / 2);
    let mut dx = vec![0.0; x.len()];
    for c in 0..x.channels {
        for y in 0..h2 {
            for xx in 0..w2 {
                let d = 0.25 * dy[c * h2 * w2 + y * w2 + xx];
                let i = c * x.plane() + 2 * y * x.width + 2 * xx;
                dx[i] += d;
                dx[i + 1] += d;
                dx[i + x.width] += d;
                dx[i + x.width + 1] += d;
            }
        }
    }
    dx
}

fn upsample2_forward(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.height * 2, x.width * 2);
    let mut data = Vec::with_capacity(x.channels * h2 * w2);
    for c in 0..x.channels {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for y in 0..h2 {
            for xx in 0..w2 {
                data.push(src[(y / 2) * x.width + xx / 2]);
            }
        }
    }
    Tensor {
        channels: x.channels,
        height: h2,
        width: w2,
        data,
    }
}

fn upsample2_backward(x: &Tensor, dy: &[f64]) -> Vec<f64> {
    let (h2, w2) = (x.height * 2, x.width * 2);
    let mut dx = vec![0.0; x.len()];
    for c in 0..x.channels {
        for y in 0..h2 {
            for xx in 0..w2 {
                dx[c * x.plane() + (y / 2) * x.width + xx / 2] += dy[c * h2 * w2 + y * w2 + xx];
            }
        }
    }
    dx
}
