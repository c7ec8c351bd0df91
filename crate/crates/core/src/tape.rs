//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive executed through it. Calling
//! [`Tape::backward`] on a scalar node replays the record in reverse and
//! accumulates exact gradients for every node that requires them. A tape and
//! its nodes belong to one logical task; independent tapes may run in
//! parallel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a differentiable resize-then-zero-pad transform.
///
/// The input plane is bilinearly resized to `new_h x new_w` and placed into a
/// zero canvas of the original size at offset `(off_y, off_x)`.
#[derive(Clone, Copy, Debug)]
pub struct ResizeGeom {
    pub new_h: usize,
    pub new_w: usize,
    pub off_y: usize,
    pub off_x: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChanBias(Var, Var),
    Conv2d(Var, Var),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    BceWithLogits { logits: Var, labels: Tensor },
    ResizePad { input: Var, geom: ResizeGeom },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    // Accumulated across backward calls; reset only via zero_grad.
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus: ln(1 + e^x).
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, if it required one and backward ran.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0]
            .grad
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record an input whose gradient will be populated by backward.
    pub fn leaf_grad(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip(self.value(b), "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip(self.value(b), "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * row[j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// [m,n] + [n] broadcast over rows.
    pub fn add_row_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (si, sb) = (self.value(input).shape(), self.value(bias).shape());
        if si.len() != 2 || sb.len() != 1 || si[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: si.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, n) = (si[0], si[1]);
        let (di, db) = (self.value(input).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(di[i * n + j] + db[j]);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(input) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBias(input, bias), ng))
    }

    /// [N,C,H,W] + [C] broadcast over everything but the channel axis.
    pub fn add_chan_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (si, sb) = (self.value(input).shape(), self.value(bias).shape());
        if si.len() != 4 || sb.len() != 1 || si[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_chan_bias",
                lhs: si.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (di, db) = (self.value(input).data(), self.value(bias).data());
        let hw = h * w;
        let mut out = Vec::with_capacity(di.len());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for p in 0..hw {
                    out.push(di[base + p] + db[ch]);
                }
            }
        }
        let value = Tensor::new(si.to_vec(), out)?;
        let ng = self.needs(input) || self.needs(bias);
        Ok(self.push(value, Op::AddChanBias(input, bias), ng))
    }

    /// Valid 2-D convolution, stride 1: [N,Cin,H,W] * [Cout,Cin,kh,kw].
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || si[2] < sk[2] || si[3] < sk[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: si.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let (n, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let (di, dk) = (self.value(input).data(), self.value(kernel).data());
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for o in 0..cout {
                for c in 0..cin {
                    let kbase = ((o * cin) + c) * kh * kw;
                    let ibase = ((b * cin) + c) * h * w;
                    for u in 0..kh {
                        for v in 0..kw {
                            let kv = dk[kbase + u * kw + v];
                            if kv == 0.0 {
                                continue;
                            }
                            for i in 0..oh {
                                let irow = ibase + (i + u) * w + v;
                                let orow = ((b * cout) + o) * oh * ow + i * ow;
                                for j in 0..ow {
                                    out[orow + j] += kv * di[irow + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let ng = self.needs(input) || self.needs(kernel);
        Ok(self.push(value, Op::Conv2d(input, kernel), ng))
    }

    /// 2x2 max-pool, stride 2, trailing row/column dropped on odd sizes.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let si = self.value(input).shape();
        if si.len() != 4 || si[2] < 2 || si[3] < 2 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2",
                lhs: si.to_vec(),
                rhs: vec![2, 2],
            });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (oh, ow) = (h / 2, w / 2);
        let di = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for b in 0..n {
            for ch in 0..c {
                let base = ((b * c) + ch) * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best_idx = base + (2 * i) * w + 2 * j;
                        let mut best = di[best_idx];
                        for (du, dv) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * i + du) * w + 2 * j + dv;
                            if di[idx] > best {
                                best = di[idx];
                                best_idx = idx;
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let ng = self.needs(input);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, ng))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x.max(0.0));
        let ng = self.needs(input);
        self.push(value, Op::Relu(input), ng)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        let ng = self.needs(input);
        self.push(value, Op::Sigmoid(input), ng)
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().sum();
        let ng = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum(input), ng)
    }

    /// Mean of all elements, rank-0 result.
    pub fn mean(&mut self, input: Var) -> Var {
        let d = self.value(input).data();
        let s: f64 = d.iter().sum();
        let ng = self.needs(input);
        self.push(Tensor::scalar(s / d.len() as f64), Op::Mean(input), ng)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let ng = self.needs(input);
        Ok(self.push(value, Op::Reshape(input), ng))
    }

    /// Mean binary cross-entropy between logits and constant {0,1} labels,
    /// computed in the stable softplus form.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != labels.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: lv.shape().to_vec(),
                rhs: labels.shape().to_vec(),
            });
        }
        if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid(
                "bce_with_logits: labels must be 0 or 1 (resolve uncertain labels first)",
            ));
        }
        let n = lv.len() as f64;
        let mut total = 0.0;
        for (&l, &y) in lv.data().iter().zip(labels.data()) {
            // max(l,0) - l*y + ln(1 + e^{-|l|})
            total += l.max(0.0) - l * y + softplus(-l.abs());
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                labels: labels.clone(),
            },
            ng,
        ))
    }

    /// Bilinear resize to `geom.new_h x new_w`, zero-padded back to the
    /// original plane size at the given offset. Linear in the input.
    pub fn resize_pad(&mut self, input: Var, geom: ResizeGeom) -> Result<Var> {
        let si = self.value(input).shape();
        if si.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "resize_pad",
                lhs: si.to_vec(),
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        if geom.new_h == 0
            || geom.new_w == 0
            || geom.new_h + geom.off_y > h
            || geom.new_w + geom.off_x > w
        {
            return Err(Error::invalid(format!(
                "resize_pad: geometry {:?} does not fit a {}x{} plane",
                geom, h, w
            )));
        }
        let di = self.value(input).data();
        let mut out = vec![0.0; di.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = ((b * c) + ch) * h * w;
                for i in 0..geom.new_h {
                    let (y0, y1, wy) = lerp_coords(i, geom.new_h, h);
                    for j in 0..geom.new_w {
                        let (x0, x1, wx) = lerp_coords(j, geom.new_w, w);
                        let v = (1.0 - wy) * (1.0 - wx) * di[base + y0 * w + x0]
                            + (1.0 - wy) * wx * di[base + y0 * w + x1]
                            + wy * (1.0 - wx) * di[base + y1 * w + x0]
                            + wy * wx * di[base + y1 * w + x1];
                        out[base + (i + geom.off_y) * w + (j + geom.off_x)] = v;
                    }
                }
            }
        }
        let value = Tensor::new(si.to_vec(), out)?;
        let ng = self.needs(input);
        Ok(self.push(value, Op::ResizePad { input, geom }, ng))
    }

    /// Reverse-mode sweep from a scalar node. Gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward: no recorded tape for this node"));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward: expected a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            // Re-store so leaves and intermediates can accumulate below.
            adj[idx] = Some(g);
        }
        for (idx, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                if !self.nodes[idx].needs_grad {
                    continue;
                }
                let len = self.nodes[idx].value.len();
                let slot = self.nodes[idx].grad.get_or_insert_with(|| vec![0.0; len]);
                for (s, v) in slot.iter_mut().zip(a) {
                    *s += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let add_into = |adj: &mut [Option<Vec<f64>>], var: Var, len: usize, f: &dyn Fn(&mut [f64])| {
            let slot = adj[var.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(adj, v, g.len(), &|s| {
                            for (si, gi) in s.iter_mut().zip(g) {
                                *si += gi;
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(adj, *a, g.len(), &|s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si += gi;
                        }
                    });
                }
                if self.needs(*b) {
                    add_into(adj, *b, g.len(), &|s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si -= gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    add_into(adj, *a, g.len(), &|s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * db[i];
                        }
                    });
                }
                if self.needs(*b) {
                    add_into(adj, *b, g.len(), &|s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * da[i];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let c = *c;
                    add_into(adj, *a, g.len(), &|s| {
                        for i in 0..g.len() {
                            s[i] += c * g[i];
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    // dA = g . B^T
                    add_into(adj, *a, m * k, &|s| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * db[p * n + j];
                                }
                                s[i * k + p] += acc;
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    // dB = A^T . g
                    add_into(adj, *b, k * n, &|s| {
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += da[i * k + p] * g[i * n + j];
                                }
                                s[p * n + j] += acc;
                            }
                        }
                    });
                }
            }
            Op::AddRowBias(input, bias) => {
                let si = self.value(*input).shape();
                let (m, n) = (si[0], si[1]);
                if self.needs(*input) {
                    add_into(adj, *input, m * n, &|s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si += gi;
                        }
                    });
                }
                if self.needs(*bias) {
                    add_into(adj, *bias, n, &|s| {
                        for i in 0..m {
                            for j in 0..n {
                                s[j] += g[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::AddChanBias(input, bias) => {
                let si = self.value(*input).shape();
                let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                let hw = h * w;
                if self.needs(*input) {
                    add_into(adj, *input, n * c * hw, &|s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si += gi;
                        }
                    });
                }
                if self.needs(*bias) {
                    add_into(adj, *bias, c, &|s| {
                        for b in 0..n {
                            for ch in 0..c {
                                let base = ((b * c) + ch) * hw;
                                let mut acc = 0.0;
                                for p in 0..hw {
                                    acc += g[base + p];
                                }
                                s[ch] += acc;
                            }
                        }
                    });
                }
            }
            Op::Conv2d(input, kernel) => {
                let si = self.value(*input).shape();
                let sk = self.value(*kernel).shape();
                let (n, cin, h, w) = (si[0], si[1], si[2], si[3]);
                let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let (di, dk) = (self.value(*input).data(), self.value(*kernel).data());
                if self.needs(*input) {
                    add_into(adj, *input, di.len(), &|s| {
                        for b in 0..n {
                            for o in 0..cout {
                                let gbase = ((b * cout) + o) * oh * ow;
                                for c in 0..cin {
                                    let kbase = ((o * cin) + c) * kh * kw;
                                    let ibase = ((b * cin) + c) * h * w;
                                    for u in 0..kh {
                                        for v in 0..kw {
                                            let kv = dk[kbase + u * kw + v];
                                            if kv == 0.0 {
                                                continue;
                                            }
                                            for i in 0..oh {
                                                for j in 0..ow {
                                                    s[ibase + (i + u) * w + (j + v)] +=
                                                        kv * g[gbase + i * ow + j];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if self.needs(*kernel) {
                    add_into(adj, *kernel, dk.len(), &|s| {
                        for b in 0..n {
                            for o in 0..cout {
                                let gbase = ((b * cout) + o) * oh * ow;
                                for c in 0..cin {
                                    let kbase = ((o * cin) + c) * kh * kw;
                                    let ibase = ((b * cin) + c) * h * w;
                                    for u in 0..kh {
                                        for v in 0..kw {
                                            let mut acc = 0.0;
                                            for i in 0..oh {
                                                for j in 0..ow {
                                                    acc += g[gbase + i * ow + j]
                                                        * di[ibase + (i + u) * w + (j + v)];
                                                }
                                            }
                                            s[kbase + u * kw + v] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.needs(*input) {
                    let len = self.value(*input).len();
                    add_into(adj, *input, len, &|s| {
                        for (gi, &src) in g.iter().zip(argmax) {
                            s[src] += gi;
                        }
                    });
                }
            }
            Op::Relu(input) => {
                if self.needs(*input) {
                    let di = self.value(*input).data();
                    add_into(adj, *input, g.len(), &|s| {
                        for i in 0..g.len() {
                            if di[i] > 0.0 {
                                s[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(input) => {
                if self.needs(*input) {
                    let out = self.nodes[idx].value.data();
                    add_into(adj, *input, g.len(), &|s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * out[i] * (1.0 - out[i]);
                        }
                    });
                }
            }
            Op::Sum(input) => {
                if self.needs(*input) {
                    let len = self.value(*input).len();
                    add_into(adj, *input, len, &|s| {
                        for si in s.iter_mut() {
                            *si += g[0];
                        }
                    });
                }
            }
            Op::Mean(input) => {
                if self.needs(*input) {
                    let len = self.value(*input).len();
                    let scale = g[0] / len as f64;
                    add_into(adj, *input, len, &|s| {
                        for si in s.iter_mut() {
                            *si += scale;
                        }
                    });
                }
            }
            Op::Reshape(input) => {
                if self.needs(*input) {
                    add_into(adj, *input, g.len(), &|s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si += gi;
                        }
                    });
                }
            }
            Op::BceWithLogits { logits, labels } => {
                if self.needs(*logits) {
                    let dl = self.value(*logits).data();
                    let n = dl.len() as f64;
                    add_into(adj, *logits, dl.len(), &|s| {
                        for i in 0..dl.len() {
                            s[i] += g[0] * (sigmoid(dl[i]) - labels.data()[i]) / n;
                        }
                    });
                }
            }
            Op::ResizePad { input, geom } => {
                if self.needs(*input) {
                    let si = self.value(*input).shape();
                    let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                    let geom = *geom;
                    add_into(adj, *input, n * c * h * w, &|s| {
                        for b in 0..n {
                            for ch in 0..c {
                                let base = ((b * c) + ch) * h * w;
                                for i in 0..geom.new_h {
                                    let (y0, y1, wy) = lerp_coords(i, geom.new_h, h);
                                    for j in 0..geom.new_w {
                                        let (x0, x1, wx) = lerp_coords(j, geom.new_w, w);
                                        let gi =
                                            g[base + (i + geom.off_y) * w + (j + geom.off_x)];
                                        s[base + y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * gi;
                                        s[base + y0 * w + x1] += (1.0 - wy) * wx * gi;
                                        s[base + y1 * w + x0] += wy * (1.0 - wx) * gi;
                                        s[base + y1 * w + x1] += wy * wx * gi;
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Source coordinates and fractional weight for bilinear sampling of output
/// index `i` on an axis resized from `src` to `dst` extents.
fn lerp_coords(i: usize, dst: usize, src: usize) -> (usize, usize, f64) {
    let pos = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
    let pos = pos.clamp(0.0, (src - 1) as f64);
    let y0 = pos.floor() as usize;
    let y1 = (y0 + 1).min(src - 1);
    (y0, y1, pos - y0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0; 6]));
        let b = tape.leaf(t(&[3, 1], &[1.0; 3]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 3.0]);
        let bad = tape.matmul(b, a);
        assert!(bad.is_err());
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).item().unwrap(), 0.5);
    }

    #[test]
    fn conv_of_zero_image_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        let k = tape.leaf(t(&[2, 1, 3, 3], &[0.7; 18]));
        let y = tape.conv2d(x, k).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bce_trivial_values() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 1], &[0.0]));
        let y = t(&[1, 1], &[1.0]);
        let loss = tape.bce_with_logits(l, &y).unwrap();
        assert!((tape.value(loss).item().unwrap() - 2.0f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 1], &[50.0]));
        let loss = tape.bce_with_logits(l, &y).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!(v.is_finite() && v < 1e-20);

        // ln(1 + e^{-1})
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 1], &[1.0]));
        let loss = tape.bce_with_logits(l, &y).unwrap();
        assert!((tape.value(loss).item().unwrap() - 0.3132616875182228).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 1], &[0.0]));
        let y = t(&[1, 1], &[0.5]);
        assert!(tape.bce_with_logits(l, &y).is_err());
    }

    #[test]
    fn bce_stable_over_extreme_logits() {
        for &l in &[-1e4, -50.0, 0.0, 50.0, 1e4] {
            let mut tape = Tape::new();
            let lv = tape.leaf_grad(t(&[1, 1], &[l]));
            let y = t(&[1, 1], &[1.0]);
            let loss = tape.bce_with_logits(lv, &y).unwrap();
            tape.backward(loss).unwrap();
            assert!(tape.value(loss).item().unwrap().is_finite());
            assert!(tape.grad(lv).unwrap().all_finite());
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t(&[2, 3], &[0.3, -1.0, 2.0, 4.0, 0.0, -0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn logistic_bce_input_gradient() {
        // p = sigmoid(w*x), BCE vs y=1: dJ/dx = (p - y) * w
        // w=2, x=0.5 -> p = sigmoid(1) = 0.731059, grad = -0.537883
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t(&[1, 1], &[0.5]));
        let w = tape.leaf(t(&[1, 1], &[2.0]));
        let logit = tape.matmul(x, w).unwrap();
        let loss = tape
            .bce_with_logits(logit, &t(&[1, 1], &[1.0]))
            .unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().item().unwrap();
        assert!((g - (-0.5378828427399902)).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 3]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t(&[1, 1, 2, 2], &[1.0, 5.0, 2.0, 3.0]));
        let p = tape.max_pool2(x).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn resize_pad_identity_geometry() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let x = tape.leaf(t(&[1, 1, 4, 4], &data));
        let y = tape
            .resize_pad(
                x,
                ResizeGeom {
                    new_h: 4,
                    new_w: 4,
                    off_y: 0,
                    off_x: 0,
                },
            )
            .unwrap();
        let out = tape.value(y).data();
        for (a, b) in out.iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
