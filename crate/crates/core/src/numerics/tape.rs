//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! Every op appends a node to the [`Tape`]; a [`Tensor`] is a handle into
//! it. [`Tape::backward`] walks the record once in reverse and returns the
//! gradients of every node that requires them, then clears the tape.

use std::fmt;

use super::Float;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, Float),
    MatMul(Tensor, Tensor),
    Conv2d { input: Tensor, kernel: Tensor, bias: Tensor, stride: usize },
    Relu(Tensor),
    Sigmoid(Tensor),
    Log(Tensor),
    Softmax(Tensor),
    LogSoftmax(Tensor),
    SmoothL1(Tensor),
    BceWithLogits { logits: Tensor, targets: Vec<Float> },
    RegionMean { input: Tensor, cells: Vec<usize> },
    GlobalMean(Tensor),
    Concat(Vec<Tensor>),
    Gather { input: Tensor, indices: Vec<usize> },
    Sum(Tensor),
    Mean(Tensor),
    Reshape(Tensor),
    GradReverse { input: Tensor, beta: Float },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<Float>,
    requires_grad: bool,
    op: Op,
}

/// Shape mismatch between operands; a programming error.
#[derive(Debug)]
pub struct ShapeError {
    pub op: &'static str,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

impl fmt::Display for ShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: incompatible shapes {:?} and {:?}", self.op, self.left, self.right)
    }
}

impl std::error::Error for ShapeError {}

fn shape_panic(op: &'static str, left: &[usize], right: &[usize]) -> ! {
    panic!("{}", ShapeError { op, left: left.to_vec(), right: right.to_vec() })
}

/// Gradients produced by one backward pass, keyed by tensor handle.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<Float>>>,
}

impl Gradients {
    /// Gradient of a tensor that required grad, or `None` when it was not
    /// reached by the backward pass.
    pub fn get(&self, t: Tensor) -> Option<&[Float]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output spatial size of a 3x3 convolution with padding 1.
pub fn conv_out_dim(input: usize, stride: usize) -> usize {
    (input + 2 - 3) / stride + 1
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<Float>, op: Op, parents: &[Tensor]) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { shape, value, requires_grad, op });
        Tensor(self.nodes.len() - 1)
    }

    fn node(&self, t: Tensor) -> &Node {
        &self.nodes[t.0]
    }

    /// A constant input.
    pub fn constant(&mut self, shape: &[usize], value: Vec<Float>) -> Tensor {
        if numel(shape) != value.len() {
            shape_panic("constant", shape, &[value.len()]);
        }
        self.nodes.push(Node { shape: shape.to_vec(), value, requires_grad: false, op: Op::Leaf });
        Tensor(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn parameter(&mut self, shape: &[usize], value: Vec<Float>) -> Tensor {
        let t = self.constant(shape, value);
        self.nodes[t.0].requires_grad = true;
        t
    }

    pub fn scalar_constant(&mut self, v: Float) -> Tensor {
        self.constant(&[], vec![v])
    }

    /// Non-differentiable one-hot rows: `[labels.len(), classes]`.
    pub fn one_hot(&mut self, labels: &[usize], classes: usize) -> Tensor {
        let mut v = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            assert!(l < classes, "one_hot: label {l} out of range {classes}");
            v[i * classes + l] = 1.0;
        }
        self.constant(&[labels.len(), classes], v)
    }

    /// Copies the value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let n = self.node(t);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.constant(&shape, value)
    }

    pub fn value(&self, t: Tensor) -> &[Float] {
        &self.node(t).value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.node(t).shape
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.node(t).requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self, t: Tensor) -> Float {
        let v = self.value(t);
        assert_eq!(v.len(), 1, "item: tensor has {} elements", v.len());
        v[0]
    }

    fn broadcast_check(&self, op: &'static str, a: Tensor, b: Tensor) -> usize {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            shape_panic(op, sa, sb);
        }
        numel(sb).max(1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(Float, Float) -> Float,
        op: Op,
    ) -> Tensor {
        let inner = self.broadcast_check(name, a, b);
        let va = self.value(a);
        let vb = self.value(b);
        let value = va.iter().enumerate().map(|(i, &x)| f(x, vb[i % inner])).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, &[a, b])
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Tensor, c: Float) -> Tensor {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, c), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            shape_panic("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = va[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(&vb[p * n..(p + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// 3x3 convolution with zero padding 1 on `[H, W, C_in]` inputs.
    /// `kernel` is `[3, 3, C_in, C_out]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Tensor, kernel: Tensor, bias: Tensor, stride: usize) -> Tensor {
        let (si, sk, sbias) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if si.len() != 3 || sk.len() != 4 || sk[0] != 3 || sk[1] != 3 || sk[2] != si[2] {
            shape_panic("conv2d", si, sk);
        }
        if sbias != [sk[3]] {
            shape_panic("conv2d bias", sk, sbias);
        }
        assert!(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
        let (h, w, cin, cout) = (si[0], si[1], si[2], sk[3]);
        let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                o.copy_from_slice(b);
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xin = &x[(iy as usize * w + ix as usize) * cin..][..cin];
                        let kbase = (ky * 3 + kx) * cin * cout;
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (ov, &kv) in o.iter_mut().zip(krow) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        self.push(vec![ho, wo, cout], out, Op::Conv2d { input, kernel, bias, stride }, &[
            input, kernel, bias,
        ])
    }

    fn unary(&mut self, a: Tensor, f: impl Fn(Float) -> Float, op: Op) -> Tensor {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, &[a])
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Tensor) -> Tensor {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    /// Elementwise smooth-L1 (Huber with unit transition).
    pub fn smooth_l1(&mut self, a: Tensor) -> Tensor {
        self.unary(a, |x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 }, Op::SmoothL1(a))
    }

    fn last_axis(&self, name: &'static str, a: Tensor) -> usize {
        let s = self.shape(a);
        match s.last() {
            Some(&k) if k > 0 => k,
            _ => shape_panic(name, s, &[]),
        }
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Tensor) -> Tensor {
        let k = self.last_axis("softmax", a);
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(k) {
            let m = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Softmax(a), &[a])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Tensor) -> Tensor {
        let k = self.last_axis("log_softmax", a);
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(k) {
            let m = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<Float>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::LogSoftmax(a), &[a])
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against fixed targets.
    pub fn bce_with_logits(&mut self, logits: Tensor, targets: &[Float]) -> Tensor {
        let s = self.shape(logits);
        if numel(s) != targets.len() {
            shape_panic("bce_with_logits", s, &[targets.len()]);
        }
        let value = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        let shape = s.to_vec();
        self.push(shape, value, Op::BceWithLogits { logits, targets: targets.to_vec() }, &[logits])
    }

    /// Mean of the `[C]` vectors at flat spatial positions `cells` of a
    /// `[H, W, C]` map.
    pub fn region_mean(&mut self, input: Tensor, cells: &[usize]) -> Tensor {
        let s = self.shape(input);
        if s.len() != 3 || cells.is_empty() || cells.iter().any(|&c| c >= s[0] * s[1]) {
            shape_panic("region_mean", s, &[cells.len()]);
        }
        let c = s[2];
        let x = self.value(input);
        let mut out = vec![0.0; c];
        for &cell in cells {
            for (o, &v) in out.iter_mut().zip(&x[cell * c..(cell + 1) * c]) {
                *o += v;
            }
        }
        // divide (not multiply by the reciprocal) so a full-image region
        // reproduces global_mean bit for bit
        let n = cells.len() as Float;
        for o in &mut out {
            *o /= n;
        }
        self.push(vec![c], out, Op::RegionMean { input, cells: cells.to_vec() }, &[input])
    }

    /// Mean over all but the last axis: `[..., C] -> [C]`.
    pub fn global_mean(&mut self, input: Tensor) -> Tensor {
        let c = self.last_axis("global_mean", input);
        let x = self.value(input);
        let n = x.len() / c;
        let mut out = vec![0.0; c];
        for row in x.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as Float;
        }
        self.push(vec![c], out, Op::GlobalMean(input), &[input])
    }

    /// Concatenates along axis 0; a 1-D input of length `C` counts as one
    /// row of `[1, C]`. Output is `[rows, C]`.
    pub fn concat(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat: no inputs");
        let width = *self.shape(parts[0]).last().expect("concat: scalar input");
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() > 2 || s.last() != Some(&width) {
                shape_panic("concat", self.shape(parts[0]), s);
            }
            rows += if s.len() == 1 { 1 } else { s[0] };
            value.extend_from_slice(self.value(p));
        }
        self.push(vec![rows, width], value, Op::Concat(parts.to_vec()), parts)
    }

    /// Selects elements by flat index into a 1-D tensor.
    pub fn gather(&mut self, input: Tensor, indices: &[usize]) -> Tensor {
        let x = self.value(input);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            shape_panic("gather", self.shape(input), &[bad]);
        }
        let value = indices.iter().map(|&i| x[i]).collect();
        self.push(vec![indices.len()], value, Op::Gather { input, indices: indices.to_vec() }, &[
            input,
        ])
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let s = self.value(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum(a), &[a])
    }

    /// Mean of all elements; zero for an empty tensor.
    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a);
        let m = if v.is_empty() { 0.0 } else { v.iter().sum::<Float>() / v.len() as Float };
        self.push(vec![], vec![m], Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        if numel(shape) != numel(self.shape(a)) {
            shape_panic("reshape", self.shape(a), shape);
        }
        let value = self.value(a).to_vec();
        self.push(shape.to_vec(), value, Op::Reshape(a), &[a])
    }

    /// Identity forward; backward multiplies the incoming gradient by `-beta`.
    pub fn grad_reverse(&mut self, input: Tensor, beta: Float) -> Tensor {
        let value = self.value(input).to_vec();
        let shape = self.shape(input).to_vec();
        self.push(shape, value, Op::GradReverse { input, beta }, &[input])
    }

    /// Reverse-mode sweep from a scalar loss. Returns the gradient of every
    /// node that requires grad and clears the tape.
    pub fn backward(&mut self, loss: Tensor) -> Gradients {
        let shape = self.shape(loss);
        assert!(shape.is_empty(), "backward: loss must be a scalar, got shape {shape:?}");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<Float>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // drop intermediates, keep leaves
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.nodes.clear();
        Gradients { grads }
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<Float>>], t: Tensor) -> Option<&'g mut Vec<Float>> {
        if !self.nodes[t.0].requires_grad {
            return None;
        }
        let len = self.nodes[t.0].value.len();
        Some(grads[t.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.accumulate(grads, a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = self.accumulate(grads, b) {
                    let inner = gb.len().max(1);
                    for (j, &y) in g.iter().enumerate() {
                        gb[j % inner] += sign * y;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let inner = vb.len().max(1);
                if let Some(ga) = self.accumulate(grads, a) {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j] * vb[j % inner];
                    }
                }
                if let Some(gb) = self.accumulate(grads, b) {
                    for (j, &y) in g.iter().enumerate() {
                        gb[j % inner] += y * va[j];
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = self.accumulate(grads, a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(ga) = self.accumulate(grads, a) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<Float>();
                        }
                    }
                }
                if let Some(gb) = self.accumulate(grads, b) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = va[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            &Op::Conv2d { input, kernel, bias, stride } => {
                self.conv2d_backward(node, g, grads, input, kernel, bias, stride)
            }
            &Op::Relu(a) => {
                let va = &self.nodes[a.0].value;
                if let Some(ga) = self.accumulate(grads, a) {
                    for j in 0..ga.len() {
                        if va[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let y = &node.value;
                if let Some(ga) = self.accumulate(grads, a) {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            &Op::Log(a) => {
                let va = &self.nodes[a.0].value;
                if let Some(ga) = self.accumulate(grads, a) {
                    for j in 0..ga.len() {
                        ga[j] += g[j] / va[j];
                    }
                }
            }
            &Op::SmoothL1(a) => {
                let va = &self.nodes[a.0].value;
                if let Some(ga) = self.accumulate(grads, a) {
                    for j in 0..ga.len() {
                        let x = va[j];
                        ga[j] += g[j] * if x.abs() < 1.0 { x } else { x.signum() };
                    }
                }
            }
            &Op::Softmax(a) => {
                let k = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(ga) = self.accumulate(grads, a) {
                    for r in 0..y.len() / k {
                        let (yr, gr) = (&y[r * k..(r + 1) * k], &g[r * k..(r + 1) * k]);
                        let dot: Float = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            ga[r * k + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let k = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(ga) = self.accumulate(grads, a) {
                    for r in 0..y.len() / k {
                        let (yr, gr) = (&y[r * k..(r + 1) * k], &g[r * k..(r + 1) * k]);
                        let total: Float = gr.iter().sum();
                        for j in 0..k {
                            ga[r * k + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = &self.nodes[logits.0].value;
                if let Some(ga) = self.accumulate(grads, *logits) {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * (sigmoid(z[j]) - targets[j]);
                    }
                }
            }
            Op::RegionMean { input, cells } => {
                let c = node.value.len();
                let inv = 1.0 / cells.len() as Float;
                if let Some(gi) = self.accumulate(grads, *input) {
                    for &cell in cells {
                        for (o, &y) in gi[cell * c..(cell + 1) * c].iter_mut().zip(g) {
                            *o += y * inv;
                        }
                    }
                }
            }
            &Op::GlobalMean(a) => {
                let c = node.value.len();
                if let Some(ga) = self.accumulate(grads, a) {
                    let inv = 1.0 / (ga.len() / c) as Float;
                    for row in ga.chunks_mut(c) {
                        for (o, &y) in row.iter_mut().zip(g) {
                            *o += y * inv;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.accumulate(grads, p) {
                        for (o, &y) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *o += y;
                        }
                    }
                    offset += len;
                }
            }
            Op::Gather { input, indices } => {
                if let Some(gi) = self.accumulate(grads, *input) {
                    for (&idx, &y) in indices.iter().zip(g) {
                        gi[idx] += y;
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.accumulate(grads, a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = self.accumulate(grads, a) {
                    let inv = 1.0 / ga.len().max(1) as Float;
                    for x in ga.iter_mut() {
                        *x += g[0] * inv;
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.accumulate(grads, a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            &Op::GradReverse { input, beta } => {
                if let Some(gi) = self.accumulate(grads, input) {
                    for (x, &y) in gi.iter_mut().zip(g) {
                        *x += -beta * y;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node,
        g: &[Float],
        grads: &mut [Option<Vec<Float>>],
        input: Tensor,
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
    ) {
        let si = &self.nodes[input.0].shape;
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (ho, wo, cout) = (node.shape[0], node.shape[1], node.shape[2]);
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;

        if let Some(gb) = self.accumulate(grads, bias) {
            for row in g.chunks(cout) {
                for (o, &y) in gb.iter_mut().zip(row) {
                    *o += y;
                }
            }
        }
        let taps = |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<usize> {
            let iy = (oy * stride + ky) as isize - 1;
            let ix = (ox * stride + kx) as isize - 1;
            (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w)
                .then(|| iy as usize * w + ix as usize)
        };
        if let Some(gk) = self.accumulate(grads, kernel) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = &g[(oy * wo + ox) * cout..][..cout];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let Some(pix) = taps(oy, ox, ky, kx) else { continue };
                            let kbase = (ky * 3 + kx) * cin * cout;
                            for ci in 0..cin {
                                let xv = x[pix * cin + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let krow = &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                                for (o, &y) in krow.iter_mut().zip(go) {
                                    *o += xv * y;
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(gi) = self.accumulate(grads, input) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = &g[(oy * wo + ox) * cout..][..cout];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let Some(pix) = taps(oy, ox, ky, kx) else { continue };
                            let kbase = (ky * 3 + kx) * cin * cout;
                            for ci in 0..cin {
                                let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                                gi[pix * cin + ci] +=
                                    krow.iter().zip(go).map(|(a, b)| a * b).sum::<Float>();
                            }
                        }
                    }
                }
            }
        }
    }
}
