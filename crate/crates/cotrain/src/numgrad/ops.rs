//! Forward/backward implementations of the differentiable primitives.
//!
//! Everything is a direct loop over f64 in a fixed order, so evaluation is
//! deterministic and the finite-difference oracle has full headroom.

use crate::error::{Error, Result};

use super::graph::{Graph, GraphOp, NodeId};
use super::tensor::Tensor;

// ── elementwise and reductions ──────────────────────────────────────────

#[derive(Debug)]
struct Add;
#[derive(Debug)]
struct Sub;
#[derive(Debug)]
struct Mul;
#[derive(Debug)]
struct Scale(f64);
#[derive(Debug)]
struct Sum;
#[derive(Debug)]
struct Mean;
#[derive(Debug)]
struct Relu;

impl GraphOp for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _in: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        for side in grads.iter_mut().flatten() {
            for (d, gi) in side.iter_mut().zip(g) {
                *d += gi;
            }
        }
    }
}

impl GraphOp for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _in: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        if let Some(a) = &mut grads[0] {
            for (d, gi) in a.iter_mut().zip(g) {
                *d += gi;
            }
        }
        if let Some(b) = &mut grads[1] {
            for (d, gi) in b.iter_mut().zip(g) {
                *d -= gi;
            }
        }
    }
}

impl GraphOp for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        if let Some(da) = &mut grads[0] {
            for i in 0..g.len() {
                da[i] += g[i] * b[i];
            }
        }
        if let Some(db) = &mut grads[1] {
            for i in 0..g.len() {
                db[i] += g[i] * a[i];
            }
        }
    }
}

impl GraphOp for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _in: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        if let Some(dx) = &mut grads[0] {
            for (d, gi) in dx.iter_mut().zip(g) {
                *d += gi * self.0;
            }
        }
    }
}

impl GraphOp for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, _in: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        if let Some(dx) = &mut grads[0] {
            for d in dx.iter_mut() {
                *d += g[0];
            }
        }
    }
}

impl GraphOp for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let n = inputs[0].numel() as f64;
        if let Some(dx) = &mut grads[0] {
            for d in dx.iter_mut() {
                *d += g[0] / n;
            }
        }
    }
}

impl GraphOp for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // subgradient at exactly 0 is 0
        let x = inputs[0].data();
        if let Some(dx) = &mut grads[0] {
            for i in 0..g.len() {
                if x[i] > 0.0 {
                    dx[i] += g[i];
                }
            }
        }
    }
}

// ── affine ──────────────────────────────────────────────────────────────

#[derive(Debug)]
struct Affine;

impl GraphOp for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, cin) = (x.shape()[0], x.shape()[1]);
        let cout = w.shape()[1];
        if let Some(dx) = &mut grads[0] {
            for r in 0..n {
                for i in 0..cin {
                    let mut acc = 0.0;
                    for j in 0..cout {
                        acc += g[r * cout + j] * w.data()[i * cout + j];
                    }
                    dx[r * cin + i] += acc;
                }
            }
        }
        if let Some(dw) = &mut grads[1] {
            for i in 0..cin {
                for j in 0..cout {
                    let mut acc = 0.0;
                    for r in 0..n {
                        acc += x.data()[r * cin + i] * g[r * cout + j];
                    }
                    dw[i * cout + j] += acc;
                }
            }
        }
        if let Some(db) = &mut grads[2] {
            for j in 0..cout {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += g[r * cout + j];
                }
                db[j] += acc;
            }
        }
    }
}

// ── conv2d ──────────────────────────────────────────────────────────────

#[derive(Debug)]
struct Conv2d {
    stride: usize,
    padding: usize,
}

impl GraphOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (x, k) = (inputs[0], inputs[1]);
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let (oh, ow) = (out.shape()[1], out.shape()[2]);
        let (s, p) = (self.stride as isize, self.padding as isize);

        for kk in 0..k_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[(kk * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for c in 0..c_in {
                        for dy in 0..kh {
                            let iy = oy as isize * s + dy as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = ox as isize * s + dx as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = (c * h + iy as usize) * w + ix as usize;
                                let ki = ((kk * c_in + c) * kh + dy) * kw + dx;
                                if let Some(dxs) = &mut grads[0] {
                                    dxs[xi] += go * k.data()[ki];
                                }
                                if let Some(dks) = &mut grads[1] {
                                    dks[ki] += go * x.data()[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── per-channel bias over feature maps ──────────────────────────────────

#[derive(Debug)]
struct ChannelBias;

impl GraphOp for ChannelBias {
    fn name(&self) -> &'static str {
        "channel_bias"
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let x = inputs[0];
        let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if let Some(dx) = &mut grads[0] {
            for (d, gi) in dx.iter_mut().zip(g) {
                *d += gi;
            }
        }
        if let Some(db) = &mut grads[1] {
            for c in 0..c_n {
                let mut acc = 0.0;
                for i in 0..h * w {
                    acc += g[c * h * w + i];
                }
                db[c] += acc;
            }
        }
    }
}

// ── softmax ─────────────────────────────────────────────────────────────

#[derive(Debug)]
struct Softmax {
    axis: usize,
}

impl GraphOp for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let shape = inputs[0].shape();
        let (outer, classes, inner) = axis_split(shape, self.axis);
        let s = out.data();
        if let Some(dx) = &mut grads[0] {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * classes * inner + i;
                    let mut dot = 0.0;
                    for c in 0..classes {
                        let idx = base + c * inner;
                        dot += g[idx] * s[idx];
                    }
                    for c in 0..classes {
                        let idx = base + c * inner;
                        dx[idx] += s[idx] * (g[idx] - dot);
                    }
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ── graph-building entry points ─────────────────────────────────────────

impl Graph {
    fn binary_same_shape(
        &mut self,
        op: Box<dyn GraphOp>,
        a: NodeId,
        b: NodeId,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "{}: shapes {:?} and {:?} differ",
                op.name(),
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = match op.name() {
            "add" => ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
            "sub" => ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect(),
            "mul" => ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
            other => unreachable!("not a binary op: {other}"),
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.apply(op, &[a, b], out)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Box::new(Add), a, b)
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Box::new(Sub), a, b)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Box::new(Mul), a, b)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {factor}")));
        }
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| v * factor).collect(),
        )?;
        self.apply(Box::new(Scale(factor)), &[x], out)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        let out = Tensor::scalar(total)?;
        self.apply(Box::new(Sum), &[x], out)
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let total: f64 = t.data().iter().sum();
        let out = Tensor::scalar(total / t.numel() as f64)?;
        self.apply(Box::new(Mean), &[x], out)
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| v.max(0.0)).collect(),
        )?;
        self.apply(Box::new(Relu), &[x], out)
    }

    /// Row-major matrix product plus bias: `[N, Cin] x [Cin, Cout] + [Cout]`.
    /// Bias broadcasting over rows is the only broadcast in the crate.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.shape().len() != 2 || tw.shape().len() != 2 || tb.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "affine expects ranks (2, 2, 1), got ({}, {}, {})",
                tx.shape().len(),
                tw.shape().len(),
                tb.shape().len()
            )));
        }
        let (n, cin) = (tx.shape()[0], tx.shape()[1]);
        let (win, cout) = (tw.shape()[0], tw.shape()[1]);
        if cin != win || tb.shape()[0] != cout {
            return Err(Error::Dimension(format!(
                "affine: input [{n}, {cin}], weight [{win}, {cout}], bias [{}]",
                tb.shape()[0]
            )));
        }
        let mut data = vec![0.0; n * cout];
        for r in 0..n {
            for j in 0..cout {
                let mut acc = tb.data()[j];
                for i in 0..cin {
                    acc += tx.data()[r * cin + i] * tw.data()[i * cout + j];
                }
                data[r * cout + j] = acc;
            }
        }
        let out = Tensor::new(vec![n, cout], data)?;
        self.apply(Box::new(Affine), &[x, w, b], out)
    }

    /// Cross-correlation of `[C, H, W]` with kernels `[K, C, kh, kw]` and
    /// zero padding. The output size must come out integral.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (tx, tk) = (self.value(x), self.value(kernels));
        if tx.shape().len() != 3 || tk.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects input rank 3 and kernels rank 4, got {} and {}",
                tx.shape().len(),
                tk.shape().len()
            )));
        }
        let (c_in, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (k_out, kc, kh, kw) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "conv2d: input has {c_in} channels, kernels expect {kc}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Dimension(format!(
                "conv2d: kernel sides must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d: stride must be >= 1".into()));
        }
        let (oh, ow) = (
            conv_out_size(h, kh, stride, padding)?,
            conv_out_size(w, kw, stride, padding)?,
        );

        let mut data = vec![0.0; k_out * oh * ow];
        for kk in 0..k_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for dy in 0..kh {
                            let iy = (oy * stride + dy) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = (ox * stride + dx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += tx.data()[(c * h + iy as usize) * w + ix as usize]
                                    * tk.data()[((kk * c_in + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    data[(kk * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let out = Tensor::new(vec![k_out, oh, ow], data)?;
        self.apply(Box::new(Conv2d { stride, padding }), &[x, kernels], out)
    }

    /// Add a per-channel bias `[C]` to feature maps `[C, H, W]`.
    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 3 || tb.shape().len() != 1 || tb.shape()[0] != tx.shape()[0] {
            return Err(Error::Dimension(format!(
                "channel_bias: maps {:?} with bias {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let (c_n, hw) = (tx.shape()[0], tx.shape()[1] * tx.shape()[2]);
        let mut data = tx.data().to_vec();
        for c in 0..c_n {
            for i in 0..hw {
                data[c * hw + i] += tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.apply(Box::new(ChannelBias), &[x, bias], out)
    }

    /// Numerically stabilized softmax along `axis` (per-position max is
    /// subtracted before exponentiation).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        if t.shape()[axis] < 2 {
            return Err(Error::Dimension(format!(
                "softmax needs >= 2 classes along axis {axis}, got {}",
                t.shape()[axis]
            )));
        }
        let (outer, classes, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * classes * inner + i;
                let mut max = f64::NEG_INFINITY;
                for c in 0..classes {
                    max = max.max(src[base + c * inner]);
                }
                let mut denom = 0.0;
                for c in 0..classes {
                    let e = (src[base + c * inner] - max).exp();
                    data[base + c * inner] = e;
                    denom += e;
                }
                for c in 0..classes {
                    data[base + c * inner] /= denom;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.apply(Box::new(Softmax { axis }), &[x], out)
    }
}

fn conv_out_size(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(Error::Dimension(format!(
            "conv2d: kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::Dimension(format!(
            "conv2d: non-integral output size for extent {extent}, kernel {kernel}, \
             stride {stride}, padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}
