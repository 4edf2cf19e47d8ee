//! Main network, hypernetwork, losses, and metrics.
//!
//! The main network is a small MLP that maps a (normalized) robot state
//! to an estimate of the HJ value; its entire parameter vector is the
//! *output* of the hypernetwork, a CNN over the local SDF image. Only the
//! hypernetwork has trainable weights.

mod train;

pub use train::{
    evaluate, split_indices, train, train_with_observer, EpochMetrics, LossKind, TrainConfig,
    TrainDataset, TrainEvent, TrainSample,
};

use crate::geom::SdfGrid;
use crate::nn::{Graph, NodeId, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HyperError {
    #[error("parameter vector length {got} does not match spec ({want})")]
    ParamLength { got: usize, want: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("SDF geometry {got} does not match checkpoint {want}")]
    GeometryMismatch { got: String, want: String },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error("training: {0}")]
    Train(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sine,
    Selu,
    Relu,
}

/// Architecture of the per-observation value network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainNetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// One activation per hidden layer.
    pub activations: Vec<Activation>,
    /// Inputs are mapped to `(x - offset) * scale` before the first layer.
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
}

impl MainNetSpec {
    /// Standard stack: 9 hidden layers [32,32,32,16,16,16,8,8,8], first
    /// three sinusoidal, the rest SELU, linear scalar output.
    fn standard(input_dim: usize, offset: Vec<f64>, scale: Vec<f64>) -> Self {
        let hidden = vec![32, 32, 32, 16, 16, 16, 8, 8, 8];
        let mut activations = vec![Activation::Sine; 3];
        activations.extend(vec![Activation::Selu; 6]);
        Self { input_dim, hidden, activations, input_offset: offset, input_scale: scale }
    }

    /// Dubins-car network over a square local window `[0, side]^2`.
    pub fn dubins_default(window_side: f64) -> Self {
        let pi = std::f64::consts::PI;
        Self::standard(
            3,
            vec![window_side / 2.0, window_side / 2.0, 0.0],
            vec![2.0 / window_side, 2.0 / window_side, 1.0 / pi],
        )
    }

    /// Dynamic-unicycle network (5 inputs, same hidden stack).
    pub fn unicycle_default(window_side: f64, v_max: f64, omega_max: f64) -> Self {
        let pi = std::f64::consts::PI;
        Self::standard(
            5,
            vec![window_side / 2.0, window_side / 2.0, 0.0, 0.0, 0.0],
            vec![
                2.0 / window_side,
                2.0 / window_side,
                1.0 / pi,
                1.0 / v_max,
                1.0 / omega_max,
            ],
        )
    }

    pub fn validate(&self) -> Result<(), HyperError> {
        if self.hidden.len() != self.activations.len() {
            return Err(HyperError::InvalidSpec(
                "one activation per hidden layer required".into(),
            ));
        }
        if self.input_offset.len() != self.input_dim || self.input_scale.len() != self.input_dim {
            return Err(HyperError::InvalidSpec("normalization length mismatch".into()));
        }
        Ok(())
    }

    /// (in, out) pairs for every layer including the linear output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, 1));
        dims
    }

    /// Total parameter count: sum over layers of in*out + out.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Flattened main-network weights in canonical order: per layer, the
/// weight matrix row-major `[out, in]`, then the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Split into per-layer (weights, bias) tensors.
    pub fn split(&self, spec: &MainNetSpec) -> Result<Vec<(Tensor, Tensor)>, HyperError> {
        if self.len() != spec.param_count() {
            return Err(HyperError::ParamLength { got: self.len(), want: spec.param_count() });
        }
        let mut out = Vec::new();
        let mut off = 0;
        for (i, o) in spec.layer_dims() {
            let w = Tensor::new(&[o, i], self.0[off..off + i * o].to_vec())?;
            off += i * o;
            let b = Tensor::new(&[o], self.0[off..off + o].to_vec())?;
            off += o;
            out.push((w, b));
        }
        Ok(out)
    }

    /// Inverse of [`ParamVector::split`].
    pub fn flatten(layers: &[(Tensor, Tensor)]) -> Self {
        let mut data = Vec::new();
        for (w, b) in layers {
            data.extend_from_slice(w.data());
            data.extend_from_slice(b.data());
        }
        ParamVector(data)
    }
}

/// One convolution stage of the hypernetwork backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// CNN backbone + fully connected head emitting main-network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperNetSpec {
    pub input_h: usize,
    pub input_w: usize,
    pub conv: Vec<ConvLayerSpec>,
    pub fc_hidden: Vec<usize>,
}

impl HyperNetSpec {
    /// Desk-scale backbone for a square SDF image.
    pub fn desk_default(input: usize) -> Self {
        Self {
            input_h: input,
            input_w: input,
            conv: vec![
                ConvLayerSpec { out_channels: 8, kernel: 5, stride: 2 },
                ConvLayerSpec { out_channels: 16, kernel: 3, stride: 2 },
                ConvLayerSpec { out_channels: 32, kernel: 3, stride: 2 },
            ],
            fc_hidden: vec![512],
        }
    }

    /// Channels and spatial size after the conv stack.
    pub fn conv_output(&self) -> Result<(usize, usize, usize), HyperError> {
        let mut c = 1;
        let mut h = self.input_h;
        let mut w = self.input_w;
        for l in &self.conv {
            if h < l.kernel || w < l.kernel || l.stride == 0 {
                return Err(HyperError::InvalidSpec(format!(
                    "conv kernel {} does not fit {}x{}",
                    l.kernel, h, w
                )));
            }
            h = (h - l.kernel) / l.stride + 1;
            w = (w - l.kernel) / l.stride + 1;
            c = l.out_channels;
        }
        Ok((c, h, w))
    }

    /// Shapes of all trainable tensors in canonical order: conv kernels
    /// and biases, then FC weights and biases, head last.
    pub fn weight_shapes(&self, head_out: usize) -> Result<Vec<Vec<usize>>, HyperError> {
        let mut shapes = Vec::new();
        let mut cin = 1;
        for l in &self.conv {
            shapes.push(vec![l.out_channels, cin, l.kernel, l.kernel]);
            shapes.push(vec![l.out_channels]);
            cin = l.out_channels;
        }
        let (c, h, w) = self.conv_output()?;
        let mut fin = c * h * w;
        for &fh in &self.fc_hidden {
            shapes.push(vec![fh, fin]);
            shapes.push(vec![fh]);
            fin = fh;
        }
        shapes.push(vec![head_out, fin]);
        shapes.push(vec![head_out]);
        Ok(shapes)
    }

    pub fn weight_count(&self, head_out: usize) -> Result<usize, HyperError> {
        Ok(self
            .weight_shapes(head_out)?
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }
}

/// Classification quality of a predicted value field against the truth,
/// with safe = value > 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    /// truth safe, predicted safe
    pub tp: usize,
    /// truth unsafe, predicted safe
    pub fp: usize,
    /// truth safe, predicted unsafe
    pub fn_: usize,
    /// truth unsafe, predicted unsafe
    pub tn: usize,
    pub loss: f64,
}

/// Radially weighted MSE: mean of `w * (target - pred)^2` with
/// `w = 1 + alpha * exp(-beta * target^2)`. The weight comes from the
/// *true* value, emphasising accuracy near its zero level.
pub fn rwmse(pred: &[f64], target: &[f64], alpha: f64, beta: f64) -> Result<f64, HyperError> {
    if pred.len() != target.len() {
        return Err(HyperError::LengthMismatch(format!(
            "pred {} vs target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(HyperError::LengthMismatch("empty arrays".into()));
    }
    let mut acc = 0.0;
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let w = 1.0 + alpha * (-beta * t * t).exp();
        let r = t - p;
        acc += w * (r * r);
    }
    Ok(acc / pred.len() as f64)
}

/// Plain mean squared error (identical to `rwmse` with alpha = 0).
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64, HyperError> {
    rwmse(pred, target, 0.0, 1.0)
}

/// The RWMSE weight at a single true value.
pub fn rwmse_weight(target: f64, alpha: f64, beta: f64) -> f64 {
    1.0 + alpha * (-beta * target * target).exp()
}

/// Safe-set IoU and confusion counts; IoU of two empty safe sets is 1.
pub fn iou_and_confusion(pred: &[f64], target: &[f64]) -> Result<Metrics, HyperError> {
    if pred.len() != target.len() {
        return Err(HyperError::LengthMismatch(format!(
            "pred {} vs target {}",
            pred.len(),
            target.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target.iter()) {
        match (t > 0.0, p > 0.0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let union = tp + fp + fn_;
    let iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
    Ok(Metrics { iou, tp, fp, fn_, tn, loss: f64::NAN })
}

/// Build the main network inside a graph: `params` is a 1D node carrying
/// the canonical parameter layout, `states` a `[K, n]` node of raw
/// (unnormalized) states. Returns the `[K, 1]` value node. Differentiable
/// with respect to both.
pub fn main_forward_graph(
    g: &mut Graph,
    spec: &MainNetSpec,
    params: NodeId,
    states: NodeId,
) -> Result<NodeId, HyperError> {
    spec.validate()?;
    let pv_len = g.value(params).numel();
    if pv_len != spec.param_count() {
        return Err(HyperError::ParamLength { got: pv_len, want: spec.param_count() });
    }
    let k = g.value(states).shape()[0];
    let n = spec.input_dim;
    if g.value(states).shape() != [k, n] {
        return Err(HyperError::InvalidSpec(format!(
            "states shape {:?}, expected [{k}, {n}]",
            g.value(states).shape()
        )));
    }
    // Input normalization via broadcast constants.
    let offset = Tensor::new(
        &[k, n],
        (0..k * n).map(|i| spec.input_offset[i % n]).collect(),
    )?;
    let scale = Tensor::new(
        &[k, n],
        (0..k * n).map(|i| spec.input_scale[i % n]).collect(),
    )?;
    let off_node = g.input(offset);
    let scale_node = g.input(scale);
    let centered = g.sub(states, off_node)?;
    let mut h = g.mul(centered, scale_node)?;

    let mut off = 0usize;
    for (li, (cin, cout)) in spec.layer_dims().into_iter().enumerate() {
        let w_flat = g.slice1(params, off, cin * cout)?;
        off += cin * cout;
        let b = g.slice1(params, off, cout)?;
        off += cout;
        let w = g.reshape(w_flat, &[cout, cin])?;
        h = g.dense(h, w, b)?;
        if li < spec.hidden.len() {
            h = match spec.activations[li] {
                Activation::Sine => g.sine(h),
                Activation::Selu => g.selu(h),
                Activation::Relu => g.relu(h),
            };
        }
    }
    Ok(h)
}

/// Evaluate the main network on a batch of raw states without building a
/// graph. `states` is row-major `[K, n]`. Arithmetic matches the graph
/// path exactly.
pub fn main_forward(
    spec: &MainNetSpec,
    params: &ParamVector,
    states: &[f64],
) -> Result<Vec<f64>, HyperError> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(HyperError::ParamLength { got: params.len(), want: spec.param_count() });
    }
    let n = spec.input_dim;
    if states.len() % n != 0 {
        return Err(HyperError::LengthMismatch(format!(
            "states length {} not a multiple of {n}",
            states.len()
        )));
    }
    let k = states.len() / n;
    let mut cur: Vec<f64> = Vec::with_capacity(k * n);
    for row in states.chunks(n) {
        for j in 0..n {
            cur.push((row[j] - spec.input_offset[j]) * spec.input_scale[j]);
        }
    }
    let mut width = n;
    let mut off = 0usize;
    let p = &params.0;
    for (li, (cin, cout)) in spec.layer_dims().into_iter().enumerate() {
        debug_assert_eq!(width, cin);
        let w = &p[off..off + cin * cout];
        off += cin * cout;
        let b = &p[off..off + cout];
        off += cout;
        let mut next = vec![0.0; k * cout];
        for bi in 0..k {
            let xr = &cur[bi * cin..(bi + 1) * cin];
            let or = &mut next[bi * cout..(bi + 1) * cout];
            for o in 0..cout {
                let wr = &w[o * cin..(o + 1) * cin];
                let dot: f64 = xr.iter().zip(wr.iter()).map(|(a, b)| a * b).sum();
                or[o] = dot + b[o];
            }
        }
        if li < spec.hidden.len() {
            match spec.activations[li] {
                Activation::Sine => next.iter_mut().for_each(|v| *v = v.sin()),
                Activation::Selu => next.iter_mut().for_each(|v| {
                    *v = if *v > 0.0 {
                        crate::nn::SELU_LAMBDA * *v
                    } else {
                        crate::nn::SELU_LAMBDA * crate::nn::SELU_ALPHA * (v.exp() - 1.0)
                    }
                }),
                Activation::Relu => next.iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        cur = next;
        width = cout;
    }
    Ok(cur)
}

/// A trained hypernetwork with everything needed to run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub hyper: HyperNetSpec,
    pub main: MainNetSpec,
    /// Canonical-order weight tensors, quantized to f32 values (the
    /// on-disk precision) so persisted checkpoints behave identically.
    pub weights: Vec<Tensor>,
    pub sdf_mean: f64,
    pub sdf_std: f64,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub tool_version: String,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<(), HyperError> {
        let shapes = self.hyper.weight_shapes(self.main.param_count())?;
        if shapes.len() != self.weights.len() {
            return Err(HyperError::InvalidSpec(format!(
                "expected {} weight tensors, got {}",
                shapes.len(),
                self.weights.len()
            )));
        }
        for (s, w) in shapes.iter().zip(self.weights.iter()) {
            if s.as_slice() != w.shape() {
                return Err(HyperError::InvalidSpec(format!(
                    "weight shape {:?} does not match {:?}",
                    w.shape(),
                    s
                )));
            }
        }
        Ok(())
    }
}

/// Quantize a weight set to f32 precision (values stay f64 tensors).
pub fn quantize_weights(weights: &[Tensor]) -> Vec<Tensor> {
    weights
        .iter()
        .map(|t| {
            Tensor::new(t.shape(), t.data().iter().map(|&v| v as f32 as f64).collect())
                .expect("same shape")
        })
        .collect()
}

/// Initialize hypernetwork weights. Backbone and FC layers use
/// fan-in-scaled uniforms; the head weight is near zero and the head bias
/// is a draw of sensible main-network initial parameters (sine layers get
/// the sinusoidal-representation scheme, the output layer starts near
/// zero), so the emitted network is well-conditioned from the first step.
pub fn init_weights(
    hyper: &HyperNetSpec,
    main: &MainNetSpec,
    seed: u64,
) -> Result<Vec<Tensor>, HyperError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head_out = main.param_count();
    let shapes = hyper.weight_shapes(head_out)?;
    let count = shapes.len();
    let mut weights = Vec::with_capacity(count);
    for (i, shape) in shapes.iter().enumerate() {
        let numel: usize = shape.iter().product();
        let is_head_w = i == count - 2;
        let is_head_b = i == count - 1;
        let t = if is_head_b {
            Tensor::new(shape, main_init_target(main, &mut rng))?
        } else if is_head_w {
            let u = 1e-4;
            Tensor::new(shape, (0..numel).map(|_| rng.gen_range(-u..u)).collect())?
        } else if shape.len() == 1 {
            Tensor::zeros(shape)
        } else {
            // LeCun-style uniform over the fan-in.
            let fan_in: usize = shape[1..].iter().product();
            let u = (3.0 / fan_in as f64).sqrt();
            Tensor::new(shape, (0..numel).map(|_| rng.gen_range(-u..u)).collect())?
        };
        weights.push(t);
    }
    Ok(weights)
}

/// A draw of initial main-network parameters in canonical order.
fn main_init_target(spec: &MainNetSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const OMEGA0: f64 = 30.0;
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut out = Vec::with_capacity(spec.param_count());
    for (li, (cin, cout)) in dims.into_iter().enumerate() {
        let u = if li == last {
            1e-3
        } else {
            match spec.activations[li] {
                Activation::Sine => {
                    if li == 0 {
                        1.0 / cin as f64
                    } else {
                        (6.0 / cin as f64).sqrt() / OMEGA0
                    }
                }
                _ => (3.0 / cin as f64).sqrt(),
            }
        };
        for _ in 0..cin * cout {
            out.push(rng.gen_range(-u..u));
        }
        // Biases start at zero.
        out.extend(std::iter::repeat(0.0).take(cout));
    }
    out
}

/// Build the hypernetwork inside a graph. `weights` are input nodes in
/// canonical order; `sdf` is a `[1, H, W]` node of raw SDF values.
/// Returns the 1D parameter node.
pub fn hyper_forward_graph(
    g: &mut Graph,
    hyper: &HyperNetSpec,
    weights: &[NodeId],
    sdf: NodeId,
    sdf_mean: f64,
    sdf_std: f64,
) -> Result<NodeId, HyperError> {
    let mut h = g.offset(sdf, -sdf_mean);
    h = g.scale(h, 1.0 / sdf_std);
    let mut wi = 0usize;
    for l in &hyper.conv {
        h = g.conv2d(h, weights[wi], weights[wi + 1], l.stride)?;
        wi += 2;
        h = g.selu(h);
    }
    h = g.flatten(h);
    for _ in &hyper.fc_hidden {
        h = g.dense(h, weights[wi], weights[wi + 1])?;
        wi += 2;
        h = g.selu(h);
    }
    h = g.dense(h, weights[wi], weights[wi + 1])?;
    let out_len = g.value(h).numel();
    let flat = g.reshape(h, &[out_len])?;
    Ok(flat)
}

fn check_geometry(ckpt: &Checkpoint, sdf: &SdfGrid) -> Result<(), HyperError> {
    if sdf.height != ckpt.hyper.input_h || sdf.width != ckpt.hyper.input_w {
        return Err(HyperError::GeometryMismatch {
            got: format!("{}x{}", sdf.width, sdf.height),
            want: format!("{}x{}", ckpt.hyper.input_w, ckpt.hyper.input_h),
        });
    }
    Ok(())
}

/// Run the hypernetwork on a local SDF observation.
pub fn hyper_forward(ckpt: &Checkpoint, sdf: &SdfGrid) -> Result<ParamVector, HyperError> {
    check_geometry(ckpt, sdf)?;
    ckpt.validate()?;
    let mut g = Graph::new();
    let weight_ids: Vec<NodeId> = ckpt.weights.iter().map(|w| g.input(w.clone())).collect();
    let sdf_node = g.input(Tensor::new(
        &[1, ckpt.hyper.input_h, ckpt.hyper.input_w],
        sdf.values.clone(),
    )?);
    let params =
        hyper_forward_graph(&mut g, &ckpt.hyper, &weight_ids, sdf_node, ckpt.sdf_mean, ckpt.sdf_std)?;
    Ok(ParamVector(g.value(params).data().to_vec()))
}
