//! Reverse-mode automatic differentiation on a dynamically built tape.
//!
//! Every network in this crate (the grid detector, the caption model) builds a
//! fresh graph per evaluation, so data-dependent control flow is allowed. Ops
//! compute their value eagerly; `backward` walks the tape in reverse creation
//! order and accumulates gradients for every node that requires them.

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MatMul(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, k: usize },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    AvgPool2(NodeId),
    LeakyRelu(NodeId, f64),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Atan(NodeId),
    Square(NodeId),
    MaxEw(NodeId, NodeId),
    MinEw(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Index { x: NodeId, at: usize },
    Slice { x: NodeId, start: usize },
    Gather { x: NodeId, idxs: Vec<usize> },
    Reshape(NodeId),
    Concat(NodeId, NodeId),
    AddRow { mat: NodeId, row: NodeId },
    GatherRow { mat: NodeId, row: usize },
    Softmax(NodeId),
    CrossEntropyLogits { logits: NodeId, target: usize },
    BceWithLogits { logits: NodeId, targets: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A dynamically built computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node.
    ///
    /// Returns a zero tensor when the node did not participate in the loss.
    pub fn get(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A differentiable leaf (parameter or input under attack).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_ew(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_ew(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_ew(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_ew(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), self.needs(a) || self.needs(b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), self.needs(a))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a), self.needs(a))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let v = matmul_raw(av.data(), bv.data(), m, k, n);
        self.push(Tensor::new(&[m, n], v), Op::MatMul(a, b), self.needs(a) || self.needs(b))
    }

    /// Same-padding convolution: `[ci,h,w] * [co,ci,k,k] + [co] -> [co,h,w]`.
    /// Kernel size must be odd.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize) -> NodeId {
        assert!(k % 2 == 1, "conv kernel must be odd");
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let co = wv.shape()[0];
        assert_eq!(wv.shape(), &[co, ci, k, k]);
        assert_eq!(bv.shape(), &[co]);
        let mut out = vec![0.0; co * h * wd];
        conv2d_forward(xv.data(), wv.data(), bv.data(), &mut out, ci, co, h, wd, k);
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::new(&[co, h, wd], out), Op::Conv2d { x, w, b, k }, rg)
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even.
    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        let data = xv.data();
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ch * h * w + (2 * y + dy) * w + 2 * xo + dx;
                            if data[i] > best {
                                best = data[i];
                                best_i = i;
                            }
                        }
                    }
                    out[ch * ho * wo + y * wo + xo] = best;
                    argmax[ch * ho * wo + y * wo + xo] = best_i;
                }
            }
        }
        let rg = self.needs(x);
        self.push(Tensor::new(&[c, ho, wo], out), Op::MaxPool2 { x, argmax }, rg)
    }

    /// 2x2 average pooling with stride 2. Unlike max pooling this is smooth,
    /// which keeps finite-difference checks of pixel gradients clean.
    pub fn avgpool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; c * ho * wo];
        let data = xv.data();
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let base = ch * h * w + 2 * y * w + 2 * xo;
                    out[ch * ho * wo + y * wo + xo] =
                        0.25 * (data[base] + data[base + 1] + data[base + w] + data[base + w + 1]);
                }
            }
        }
        let rg = self.needs(x);
        self.push(Tensor::new(&[c, ho, wo], out), Op::AvgPool2(x), rg)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), self.needs(a))
    }

    /// Smooth rectifier ln(1 + e^x), evaluated stably.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(v, Op::Softplus(a), self.needs(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), self.needs(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), self.needs(a))
    }

    pub fn atan(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::atan);
        self.push(v, Op::Atan(a), self.needs(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), self.needs(a))
    }

    /// Elementwise maximum; ties route the gradient to the first argument.
    pub fn max_ew(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_ew(self.value(a), self.value(b), f64::max);
        self.push(v, Op::MaxEw(a, b), self.needs(a) || self.needs(b))
    }

    pub fn min_ew(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_ew(self.value(a), self.value(b), f64::min);
        self.push(v, Op::MinEw(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::Sum(a), self.needs(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(v, Op::Mean(a), self.needs(a))
    }

    /// Extract one element as a scalar node.
    pub fn index(&mut self, x: NodeId, at: usize) -> NodeId {
        let v = Tensor::scalar(self.value(x).data()[at]);
        self.push(v, Op::Index { x, at }, self.needs(x))
    }

    /// Contiguous flat range `[start, start+len)` as a rank-1 tensor.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let data = self.value(x).data()[start..start + len].to_vec();
        self.push(Tensor::new(&[len], data), Op::Slice { x, start }, self.needs(x))
    }

    /// Arbitrary flat indices as a rank-1 tensor.
    pub fn gather(&mut self, x: NodeId, idxs: Vec<usize>) -> NodeId {
        let xv = self.value(x).data();
        let data: Vec<f64> = idxs.iter().map(|&i| xv[i]).collect();
        let n = data.len();
        self.push(Tensor::new(&[n], data), Op::Gather { x, idxs }, self.needs(x))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a), self.needs(a))
    }

    /// Concatenate two rank-1 tensors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 1);
        assert_eq!(bv.shape().len(), 1);
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let n = data.len();
        self.push(Tensor::new(&[n], data), Op::Concat(a, b), self.needs(a) || self.needs(b))
    }

    /// Broadcast-add a rank-1 row onto every row of a matrix.
    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> NodeId {
        let (mv, rv) = (self.value(mat), self.value(row));
        let (n, d) = (mv.shape()[0], mv.shape()[1]);
        assert_eq!(rv.shape(), &[d]);
        let mut data = mv.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += rv.data()[j];
            }
        }
        let rg = self.needs(mat) || self.needs(row);
        self.push(Tensor::new(&[n, d], data), Op::AddRow { mat, row }, rg)
    }

    /// Embedding lookup: row `row` of a `[v,d]` matrix as a rank-1 tensor.
    pub fn gather_row(&mut self, mat: NodeId, row: usize) -> NodeId {
        let mv = self.value(mat);
        let d = mv.shape()[1];
        let data = mv.data()[row * d..(row + 1) * d].to_vec();
        self.push(Tensor::new(&[d], data), Op::GatherRow { mat, row }, self.needs(mat))
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.shape().len(), 1);
        let v = Tensor::new(av.shape(), softmax_raw(av.data()));
        self.push(v, Op::Softmax(a), self.needs(a))
    }

    /// Fused softmax + negative log-likelihood of `target`.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, target: usize) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.shape().len(), 1);
        let m = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.data().iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let v = Tensor::scalar(lse - z.data()[target]);
        self.push(v, Op::CrossEntropyLogits { logits, target }, self.needs(logits))
    }

    /// Elementwise binary cross-entropy against constant targets, on logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Tensor) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape());
        let data: Vec<f64> = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let rg = self.needs(logits);
        self.push(Tensor::new(z.shape(), data), Op::BceWithLogits { logits, targets }, rg)
    }

    /// Backpropagate from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(gy);
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, gy.data());
                    self.accumulate(&mut grads, *b, gy.data());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, gy.data());
                    let neg: Vec<f64> = gy.data().iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<f64> = gy.data().iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = gy.data().iter().zip(av).map(|(g, a)| g * a).collect();
                    self.accumulate(&mut grads, *a, &ga);
                    self.accumulate(&mut grads, *b, &gb);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<f64> = gy.data().iter().zip(bv).map(|(g, b)| g / b).collect();
                    let gb: Vec<f64> = gy
                        .data()
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect();
                    self.accumulate(&mut grads, *a, &ga);
                    self.accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = gy.data().iter().map(|g| g * c).collect();
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::Offset(a) => self.accumulate(&mut grads, *a, gy.data()),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    // dA = dC * B^T, dB = A^T * dC
                    let bt = transpose_raw(bv.data(), k, n);
                    let ga = matmul_raw(gy.data(), &bt, m, n, k);
                    let at = transpose_raw(av.data(), m, k);
                    let gb = matmul_raw(&at, gy.data(), k, m, n);
                    self.accumulate(&mut grads, *a, &ga);
                    self.accumulate(&mut grads, *b, &gb);
                }
                Op::Conv2d { x, w, b, k } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let co = wv.shape()[0];
                    if self.needs(*x) {
                        let mut gx = vec![0.0; ci * h * wd];
                        conv2d_backward_input(wv.data(), gy.data(), &mut gx, ci, co, h, wd, *k);
                        self.accumulate(&mut grads, *x, &gx);
                    }
                    if self.needs(*w) {
                        let mut gw = vec![0.0; co * ci * k * k];
                        conv2d_backward_weight(xv.data(), gy.data(), &mut gw, ci, co, h, wd, *k);
                        self.accumulate(&mut grads, *w, &gw);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; co];
                        for c in 0..co {
                            gb[c] = gy.data()[c * h * wd..(c + 1) * h * wd].iter().sum();
                        }
                        self.accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += gy.data()[o];
                    }
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::AvgPool2(x) => {
                    let xv = self.value(*x);
                    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let (ho, wo) = (h / 2, w / 2);
                    let mut gx = vec![0.0; xv.len()];
                    for ch in 0..c {
                        for y in 0..ho {
                            for xo in 0..wo {
                                let g = 0.25 * gy.data()[ch * ho * wo + y * wo + xo];
                                let base = ch * h * w + 2 * y * w + 2 * xo;
                                gx[base] += g;
                                gx[base + 1] += g;
                                gx[base + w] += g;
                                gx[base + w + 1] += g;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::LeakyRelu(a, slope) => {
                    let av = self.value(*a).data();
                    let ga: Vec<f64> = gy
                        .data()
                        .iter()
                        .zip(av)
                        .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                        .collect();
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::Softplus(a) => {
                    let av = self.value(*a).data();
                    let ga: Vec<f64> =
                        gy.data().iter().zip(av).map(|(g, &x)| g * sigmoid(x)).collect();
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let yv = node.value.data();
                    let ga: Vec<f64> =
                        gy.data().iter().zip(yv).map(|(g, &y)| g * y * (1.0 - y)).collect();
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::Tanh(a) => {
                    let yv = node.value.data();
                    let ga: Vec<f64> =
                        gy.data().iter().zip(yv).map(|(g, &y)| g * (1.0 - y * y)).collect();
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::Atan(a) => {
                    let av = self.value(*a).data();
                    let ga: Vec<f64> =
                        gy.data().iter().zip(av).map(|(g, &x)| g / (1.0 + x * x)).collect();
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::Square(a) => {
                    let av = self.value(*a).data();
                    let ga: Vec<f64> = gy.data().iter().zip(av).map(|(g, &x)| g * 2.0 * x).collect();
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::MaxEw(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for i in 0..av.len() {
                        if av[i] >= bv[i] {
                            ga[i] = gy.data()[i];
                        } else {
                            gb[i] = gy.data()[i];
                        }
                    }
                    self.accumulate(&mut grads, *a, &ga);
                    self.accumulate(&mut grads, *b, &gb);
                }
                Op::MinEw(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for i in 0..av.len() {
                        if av[i] <= bv[i] {
                            ga[i] = gy.data()[i];
                        } else {
                            gb[i] = gy.data()[i];
                        }
                    }
                    self.accumulate(&mut grads, *a, &ga);
                    self.accumulate(&mut grads, *b, &gb);
                }
                Op::Sum(a) => {
                    let g = gy.item();
                    let ga = vec![g; self.value(*a).len()];
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let g = gy.item() / n as f64;
                    let ga = vec![g; n];
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::Index { x, at } => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    gx[*at] = gy.item();
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::Slice { x, start } => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    gx[*start..*start + gy.data().len()].copy_from_slice(gy.data());
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::Gather { x, idxs } => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (o, &i) in idxs.iter().enumerate() {
                        gx[i] += gy.data()[o];
                    }
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::Reshape(a) => self.accumulate(&mut grads, *a, gy.data()),
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    self.accumulate(&mut grads, *a, &gy.data()[..na]);
                    self.accumulate(&mut grads, *b, &gy.data()[na..]);
                }
                Op::AddRow { mat, row } => {
                    let d = self.value(*row).len();
                    let n = self.value(*mat).shape()[0];
                    self.accumulate(&mut grads, *mat, gy.data());
                    let mut gr = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            gr[j] += gy.data()[i * d + j];
                        }
                    }
                    self.accumulate(&mut grads, *row, &gr);
                }
                Op::GatherRow { mat, row } => {
                    let mv = self.value(*mat);
                    let d = mv.shape()[1];
                    let mut gm = vec![0.0; mv.len()];
                    gm[row * d..(row + 1) * d].copy_from_slice(gy.data());
                    self.accumulate(&mut grads, *mat, &gm);
                }
                Op::Softmax(a) => {
                    let s = node.value.data();
                    let dot: f64 = gy.data().iter().zip(s).map(|(g, y)| g * y).sum();
                    let ga: Vec<f64> =
                        gy.data().iter().zip(s).map(|(g, &y)| y * (g - dot)).collect();
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::CrossEntropyLogits { logits, target } => {
                    let z = self.value(*logits).data();
                    let mut ga = softmax_raw(z);
                    ga[*target] -= 1.0;
                    let g = gy.item();
                    for v in &mut ga {
                        *v *= g;
                    }
                    self.accumulate(&mut grads, *logits, &ga);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.value(*logits).data();
                    let ga: Vec<f64> = z
                        .iter()
                        .zip(targets.data())
                        .zip(gy.data())
                        .map(|((&z, &t), &g)| g * (sigmoid(z) - t))
                        .collect();
                    self.accumulate(&mut grads, *logits, &ga);
                }
            }
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64]) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gi, &d) in g.data_mut().iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => {
                grads[id.0] = Some(Tensor::new(self.value(id).shape(), delta.to_vec()));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_raw(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn zip_ew(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    k: usize,
) {
    let pad = k / 2;
    for c in 0..co {
        let plane = &mut out[c * h * wd..(c + 1) * h * wd];
        plane.fill(b[c]);
        for ic in 0..ci {
            let xin = &x[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = row_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = row_range(wd, dx);
                    let wv = w[((c * ci + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let src = &xin[iy * wd + (x0 as isize + dx) as usize..];
                        let dst = &mut plane[y * wd + x0..y * wd + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input(
    w: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    k: usize,
) {
    let pad = k / 2;
    for c in 0..co {
        let gplane = &gy[c * h * wd..(c + 1) * h * wd];
        for ic in 0..ci {
            let gxin = &mut gx[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = row_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = row_range(wd, dx);
                    let wv = w[((c * ci + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let src = &gplane[y * wd + x0..y * wd + x1];
                        let dst = &mut gxin[iy * wd + (x0 as isize + dx) as usize..];
                        for (s, d) in src.iter().zip(dst.iter_mut()) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight(
    x: &[f64],
    gy: &[f64],
    gw: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    k: usize,
) {
    let pad = k / 2;
    for c in 0..co {
        let gplane = &gy[c * h * wd..(c + 1) * h * wd];
        for ic in 0..ci {
            let xin = &x[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = row_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = row_range(wd, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let src = &xin[iy * wd + (x0 as isize + dx) as usize..];
                        let g = &gplane[y * wd + x0..y * wd + x1];
                        for (gv, sv) in g.iter().zip(src) {
                            acc += gv * sv;
                        }
                    }
                    gw[((c * ci + ic) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

/// Output index range `[lo, hi)` for which `idx + d` stays inside `[0, n)`.
fn row_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n - d as usize } else { n };
    (lo, hi)
}
