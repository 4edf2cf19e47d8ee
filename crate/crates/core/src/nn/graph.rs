use super::tensor::Tensor;
use super::{NnError, SELU_ALPHA, SELU_LAMBDA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Operation kinds. Parents are node indices into the tape.
#[derive(Debug, Clone)]
pub enum Op {
    Input,
    /// `x [B, in] * w' [in, out] + b [out]` -> `[B, out]`, weights `[out, in]`.
    Dense { x: NodeId, w: NodeId, b: NodeId },
    /// Cross-correlation, no padding: x `[C, H, W]`, k `[O, C, kh, kw]`,
    /// bias `[O]`, stride `s` -> `[O, oh, ow]`.
    Conv2d { x: NodeId, k: NodeId, b: NodeId, stride: usize },
    /// 2x2 average pooling with stride 2 (floor).
    AvgPool2 { x: NodeId },
    Flatten { x: NodeId },
    /// Concatenation of two 1D tensors.
    Concat { a: NodeId, b: NodeId },
    Sine { x: NodeId },
    Selu { x: NodeId },
    Relu { x: NodeId },
    Square { x: NodeId },
    Exp { x: NodeId },
    Neg { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Offset { x: NodeId, c: f64 },
    MeanAll { x: NodeId },
    /// 1D slice `[start, start + len)`.
    Slice1 { x: NodeId, start: usize, len: usize },
    /// Shape change; the target shape is the node's value shape.
    Reshape { x: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2 { .. } => "avgpool2",
            Op::Flatten { .. } => "flatten",
            Op::Concat { .. } => "concat",
            Op::Sine { .. } => "sine",
            Op::Selu { .. } => "selu",
            Op::Relu { .. } => "relu",
            Op::Square { .. } => "square",
            Op::Exp { .. } => "exp",
            Op::Neg { .. } => "neg",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Offset { .. } => "offset",
            Op::MeanAll { .. } => "mean",
            Op::Slice1 { .. } => "slice",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Tensor,
}

/// An eagerly evaluated computation tape. Construction order is
/// topological order, so forward re-evaluation and the reverse sweep are
/// simple linear passes.
pub struct Graph {
    nodes: Vec<Node>,
    dirty: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), dirty: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` output with respect to this node.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { op, value, grad });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> NnError {
        NnError::ShapeMismatch { node: self.nodes.len(), op, detail }
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    /// Replace an input node's value; shapes must match. Marks the graph
    /// stale until `forward` runs.
    pub fn set_input(&mut self, id: NodeId, t: Tensor) -> Result<(), NnError> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Input) {
            return Err(NnError::InvalidTensor(format!(
                "node {} is {}, not an input",
                id.0,
                node.op.name()
            )));
        }
        if node.value.shape() != t.shape() {
            return Err(NnError::InvalidTensor(format!(
                "input shape {:?} does not match {:?}",
                t.shape(),
                node.value.shape()
            )));
        }
        node.value = t;
        self.dirty = true;
        Ok(())
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape().to_vec(),
            self.nodes[w.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(self.mismatch("dense", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let value = Tensor::zeros(&[xs[0], ws[0]]);
        let id = self.push(Op::Dense { x, w, b }, value);
        self.eval(id.0);
        Ok(id)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId, NnError> {
        let (xs, ks, bs) = (
            self.nodes[x.0].value.shape().to_vec(),
            self.nodes[k.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if stride == 0
            || xs.len() != 3
            || ks.len() != 4
            || bs.len() != 1
            || ks[1] != xs[0]
            || ks[0] != bs[0]
            || xs[1] < ks[2]
            || xs[2] < ks[3]
        {
            return Err(self.mismatch(
                "conv2d",
                format!("x {xs:?}, kernel {ks:?}, b {bs:?}, stride {stride}"),
            ));
        }
        let oh = (xs[1] - ks[2]) / stride + 1;
        let ow = (xs[2] - ks[3]) / stride + 1;
        let value = Tensor::zeros(&[ks[0], oh, ow]);
        let id = self.push(Op::Conv2d { x, k, b, stride }, value);
        self.eval(id.0);
        Ok(id)
    }

    pub fn avgpool2(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 3 || xs[1] < 2 || xs[2] < 2 {
            return Err(self.mismatch("avgpool2", format!("x {xs:?}")));
        }
        let value = Tensor::zeros(&[xs[0], xs[1] / 2, xs[2] / 2]);
        let id = self.push(Op::AvgPool2 { x }, value);
        self.eval(id.0);
        Ok(id)
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let numel = self.nodes[x.0].value.numel();
        let value = Tensor::zeros(&[1, numel]);
        let id = self.push(Op::Flatten { x }, value);
        self.eval(id.0);
        id
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if sa.len() != 1 || sb.len() != 1 {
            return Err(self.mismatch("concat", format!("a {sa:?}, b {sb:?} (need 1D)")));
        }
        let value = Tensor::zeros(&[sa[0] + sb[0]]);
        let id = self.push(Op::Concat { a, b }, value);
        self.eval(id.0);
        Ok(id)
    }

    fn unary(&mut self, op: Op, x: NodeId) -> NodeId {
        let value = Tensor::zeros(self.nodes[x.0].value.shape());
        let id = self.push(op, value);
        self.eval(id.0);
        id
    }

    pub fn sine(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sine { x }, x)
    }

    pub fn selu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Selu { x }, x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu { x }, x)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Square { x }, x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Exp { x }, x)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Neg { x }, x)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(Op::Scale { x, c }, x)
    }

    pub fn offset(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(Op::Offset { x, c }, x)
    }

    fn binary(&mut self, make: impl Fn(NodeId, NodeId) -> Op, name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if sa != sb {
            return Err(self.mismatch(name, format!("a {sa:?} vs b {sb:?}")));
        }
        let value = Tensor::zeros(&sa);
        let id = self.push(make(a, b), value);
        self.eval(id.0);
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary(|a, b| Op::Add { a, b }, "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary(|a, b| Op::Sub { a, b }, "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary(|a, b| Op::Mul { a, b }, "mul", a, b)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let id = self.push(Op::MeanAll { x }, Tensor::zeros(&[1]));
        self.eval(id.0);
        id
    }

    pub fn slice1(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 1 || start + len > xs[0] {
            return Err(self.mismatch(
                "slice",
                format!("range {start}..{} of {xs:?}", start + len),
            ));
        }
        let id = self.push(Op::Slice1 { x, start, len }, Tensor::zeros(&[len]));
        self.eval(id.0);
        Ok(id)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        let numel = self.nodes[x.0].value.numel();
        if shape.iter().product::<usize>() != numel {
            return Err(self.mismatch(
                "reshape",
                format!("{numel} elements to {shape:?}"),
            ));
        }
        let id = self.push(Op::Reshape { x }, Tensor::zeros(shape));
        self.eval(id.0);
        Ok(id)
    }

    /// Re-evaluate every node in construction (= topological) order.
    pub fn forward(&mut self) {
        for i in 0..self.nodes.len() {
            self.eval(i);
        }
        self.dirty = false;
    }

    fn eval(&mut self, i: usize) {
        // Split so parents (indices < i) can be read while writing node i.
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &mut rest[0];
        let val = |id: NodeId| -> &Tensor { &before[id.0].value };
        match node.op {
            Op::Input => {}
            Op::Dense { x, w, b } => {
                let (x, w, b) = (val(x), val(w), val(b));
                let (batch, nin) = (x.shape()[0], x.shape()[1]);
                let nout = w.shape()[0];
                let out = node.value.data_mut();
                for bi in 0..batch {
                    let xr = &x.data()[bi * nin..(bi + 1) * nin];
                    let or = &mut out[bi * nout..(bi + 1) * nout];
                    for o in 0..nout {
                        let wr = &w.data()[o * nin..(o + 1) * nin];
                        let dot: f64 = xr.iter().zip(wr.iter()).map(|(a, b)| a * b).sum();
                        or[o] = dot + b.data()[o];
                    }
                }
            }
            Op::Conv2d { x, k, b, stride } => {
                let (x, k, b) = (val(x), val(k), val(b));
                let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
                let oh = node.value.shape()[1];
                let ow = node.value.shape()[2];
                let out = node.value.data_mut();
                for co in 0..cout {
                    let bias = b.data()[co];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias;
                            for ci in 0..cin {
                                let kbase = ((co * cin) + ci) * kh * kw;
                                let xbase = ci * h * w;
                                for ky in 0..kh {
                                    let xrow = xbase + (oy * stride + ky) * w + ox * stride;
                                    let krow = kbase + ky * kw;
                                    acc += x.data()[xrow..xrow + kw]
                                        .iter()
                                        .zip(k.data()[krow..krow + kw].iter())
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                            }
                            out[(co * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            Op::AvgPool2 { x } => {
                let x = val(x);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let out = node.value.data_mut();
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let base = ci * h * w + 2 * oy * w + 2 * ox;
                            out[(ci * oh + oy) * ow + ox] = 0.25
                                * (x.data()[base]
                                    + x.data()[base + 1]
                                    + x.data()[base + w]
                                    + x.data()[base + w + 1]);
                        }
                    }
                }
            }
            Op::Flatten { x } | Op::Reshape { x } => {
                node.value.data_mut().copy_from_slice(val(x).data());
            }
            Op::Concat { a, b } => {
                let (a, b) = (val(a), val(b));
                let out = node.value.data_mut();
                out[..a.numel()].copy_from_slice(a.data());
                out[a.numel()..].copy_from_slice(b.data());
            }
            Op::Sine { x } => {
                for (o, &v) in node.value.data_mut().iter_mut().zip(val(x).data()) {
                    *o = v.sin();
                }
            }
            Op::Selu { x } => {
                for (o, &v) in node.value.data_mut().iter_mut().zip(val(x).data()) {
                    *o = if v > 0.0 {
                        SELU_LAMBDA * v
                    } else {
                        SELU_LAMBDA * SELU_ALPHA * (v.exp() - 1.0)
                    };
                }
            }
            Op::Relu { x } => {
                for (o, &v) in node.value.data_mut().iter_mut().zip(val(x).data()) {
                    *o = v.max(0.0);
                }
            }
            Op::Square { x } => {
                for (o, &v) in node.value.data_mut().iter_mut().zip(val(x).data()) {
                    *o = v * v;
                }
            }
            Op::Exp { x } => {
                for (o, &v) in node.value.data_mut().iter_mut().zip(val(x).data()) {
                    *o = v.exp();
                }
            }
            Op::Neg { x } => {
                for (o, &v) in node.value.data_mut().iter_mut().zip(val(x).data()) {
                    *o = -v;
                }
            }
            Op::Scale { x, c } => {
                for (o, &v) in node.value.data_mut().iter_mut().zip(val(x).data()) {
                    *o = v * c;
                }
            }
            Op::Offset { x, c } => {
                for (o, &v) in node.value.data_mut().iter_mut().zip(val(x).data()) {
                    *o = v + c;
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (val(a), val(b));
                for ((o, &x), &y) in node.value.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *o = x + y;
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (val(a), val(b));
                for ((o, &x), &y) in node.value.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *o = x - y;
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (val(a), val(b));
                for ((o, &x), &y) in node.value.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *o = x * y;
                }
            }
            Op::MeanAll { x } => {
                let x = val(x);
                let sum: f64 = x.data().iter().sum();
                node.value.data_mut()[0] = sum / x.numel() as f64;
            }
            Op::Slice1 { x, start, len } => {
                node.value.data_mut().copy_from_slice(&val(x).data()[start..start + len]);
            }
        }
    }

    /// Reverse sweep from `out`, seeding with ones (scalar outputs) or the
    /// given gradient. Gradients of all nodes accumulate by sum over
    /// fan-out and are readable via [`Graph::grad`].
    pub fn backward(&mut self, out: NodeId) -> Result<(), NnError> {
        let seed = Tensor::scalar(1.0);
        let seed = if self.nodes[out.0].value.numel() == 1 {
            seed.reshaped(self.nodes[out.0].value.shape())?
        } else {
            return Err(NnError::BadSeed);
        };
        self.backward_with(out, seed)
    }

    pub fn backward_with(&mut self, out: NodeId, seed: Tensor) -> Result<(), NnError> {
        if self.dirty {
            return Err(NnError::BackwardBeforeForward);
        }
        if seed.shape() != self.nodes[out.0].value.shape() {
            return Err(NnError::BadSeed);
        }
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.nodes[out.0].grad = seed;
        for i in (0..self.nodes.len()).rev() {
            self.propagate(i);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize) {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let dy = &node.grad;
        match node.op {
            Op::Input => {}
            Op::Dense { x, w, b } => {
                let (batch, nin) = {
                    let xs = before[x.0].value.shape();
                    (xs[0], xs[1])
                };
                let nout = before[w.0].value.shape()[0];
                // dx = dy * w
                for bi in 0..batch {
                    let dyr = &dy.data()[bi * nout..(bi + 1) * nout];
                    for o in 0..nout {
                        let g = dyr[o];
                        if g == 0.0 {
                            continue;
                        }
                        let wr = &before[w.0].value.data()[o * nin..(o + 1) * nin];
                        let dxr =
                            &mut before[x.0].grad.data_mut()[bi * nin..(bi + 1) * nin];
                        for (dxi, &wi) in dxr.iter_mut().zip(wr.iter()) {
                            *dxi += g * wi;
                        }
                    }
                }
                // dw = dy^T * x, db = column sums of dy
                for bi in 0..batch {
                    let dyr = &dy.data()[bi * nout..(bi + 1) * nout];
                    for o in 0..nout {
                        let g = dyr[o];
                        if g == 0.0 {
                            continue;
                        }
                        before[b.0].grad.data_mut()[o] += g;
                        let xr = &before[x.0].value.data()[bi * nin..(bi + 1) * nin];
                        let dwr =
                            &mut before[w.0].grad.data_mut()[o * nin..(o + 1) * nin];
                        for (dwi, &xi) in dwr.iter_mut().zip(xr.iter()) {
                            *dwi += g * xi;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, stride } => {
                let (cin, h, w) = {
                    let xs = before[x.0].value.shape();
                    (xs[0], xs[1], xs[2])
                };
                let (cout, kh, kw) = {
                    let ks = before[k.0].value.shape();
                    (ks[0], ks[2], ks[3])
                };
                let oh = node.value.shape()[1];
                let ow = node.value.shape()[2];
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dy.data()[(co * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            before[b.0].grad.data_mut()[co] += g;
                            for ci in 0..cin {
                                let kbase = ((co * cin) + ci) * kh * kw;
                                let xbase = ci * h * w;
                                for ky in 0..kh {
                                    let xrow = xbase + (oy * stride + ky) * w + ox * stride;
                                    let krow = kbase + ky * kw;
                                    for kx in 0..kw {
                                        before[k.0].grad.data_mut()[krow + kx] +=
                                            g * before[x.0].value.data()[xrow + kx];
                                        before[x.0].grad.data_mut()[xrow + kx] +=
                                            g * before[k.0].value.data()[krow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool2 { x } => {
                let (c, h, w) = {
                    let xs = before[x.0].value.shape();
                    (xs[0], xs[1], xs[2])
                };
                let (oh, ow) = (h / 2, w / 2);
                let dx = before[x.0].grad.data_mut();
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = 0.25 * dy.data()[(ci * oh + oy) * ow + ox];
                            let base = ci * h * w + 2 * oy * w + 2 * ox;
                            dx[base] += g;
                            dx[base + 1] += g;
                            dx[base + w] += g;
                            dx[base + w + 1] += g;
                        }
                    }
                }
            }
            Op::Flatten { x } | Op::Reshape { x } => {
                for (dxi, &gi) in before[x.0].grad.data_mut().iter_mut().zip(dy.data()) {
                    *dxi += gi;
                }
            }
            Op::Concat { a, b } => {
                let na = before[a.0].value.numel();
                for (dai, &gi) in before[a.0].grad.data_mut().iter_mut().zip(&dy.data()[..na]) {
                    *dai += gi;
                }
                for (dbi, &gi) in before[b.0].grad.data_mut().iter_mut().zip(&dy.data()[na..]) {
                    *dbi += gi;
                }
            }
            Op::Sine { x } => {
                let xv = &before[x.0].value;
                let n = xv.numel();
                for i in 0..n {
                    let d = xv.data()[i].cos() * dy.data()[i];
                    before[x.0].grad.data_mut()[i] += d;
                }
            }
            Op::Selu { x } => {
                let n = before[x.0].value.numel();
                for i in 0..n {
                    let v = before[x.0].value.data()[i];
                    let d = if v > 0.0 {
                        SELU_LAMBDA
                    } else {
                        SELU_LAMBDA * SELU_ALPHA * v.exp()
                    };
                    before[x.0].grad.data_mut()[i] += d * dy.data()[i];
                }
            }
            Op::Relu { x } => {
                let n = before[x.0].value.numel();
                for i in 0..n {
                    if before[x.0].value.data()[i] > 0.0 {
                        before[x.0].grad.data_mut()[i] += dy.data()[i];
                    }
                }
            }
            Op::Square { x } => {
                let n = before[x.0].value.numel();
                for i in 0..n {
                    let d = 2.0 * before[x.0].value.data()[i] * dy.data()[i];
                    before[x.0].grad.data_mut()[i] += d;
                }
            }
            Op::Exp { x } => {
                // node.value already holds exp(x).
                let n = node.value.numel();
                for i in 0..n {
                    let d = node.value.data()[i] * dy.data()[i];
                    before[x.0].grad.data_mut()[i] += d;
                }
            }
            Op::Neg { x } => {
                for (dxi, &gi) in before[x.0].grad.data_mut().iter_mut().zip(dy.data()) {
                    *dxi -= gi;
                }
            }
            Op::Scale { x, c } => {
                for (dxi, &gi) in before[x.0].grad.data_mut().iter_mut().zip(dy.data()) {
                    *dxi += c * gi;
                }
            }
            Op::Offset { x, .. } => {
                for (dxi, &gi) in before[x.0].grad.data_mut().iter_mut().zip(dy.data()) {
                    *dxi += gi;
                }
            }
            Op::Add { a, b } => {
                for (dai, &gi) in before[a.0].grad.data_mut().iter_mut().zip(dy.data()) {
                    *dai += gi;
                }
                for (dbi, &gi) in before[b.0].grad.data_mut().iter_mut().zip(dy.data()) {
                    *dbi += gi;
                }
            }
            Op::Sub { a, b } => {
                for (dai, &gi) in before[a.0].grad.data_mut().iter_mut().zip(dy.data()) {
                    *dai += gi;
                }
                for (dbi, &gi) in before[b.0].grad.data_mut().iter_mut().zip(dy.data()) {
                    *dbi -= gi;
                }
            }
            Op::Mul { a, b } => {
                let n = node.value.numel();
                for i in 0..n {
                    let gi = dy.data()[i];
                    let av = before[a.0].value.data()[i];
                    let bv = before[b.0].value.data()[i];
                    before[a.0].grad.data_mut()[i] += gi * bv;
                    before[b.0].grad.data_mut()[i] += gi * av;
                }
            }
            Op::MeanAll { x } => {
                let n = before[x.0].value.numel();
                let g = dy.data()[0] / n as f64;
                for dxi in before[x.0].grad.data_mut().iter_mut() {
                    *dxi += g;
                }
            }
            Op::Slice1 { x, start, .. } => {
                for (i, &gi) in dy.data().iter().enumerate() {
                    before[x.0].grad.data_mut()[start + i] += gi;
                }
            }
        }
    }
}
