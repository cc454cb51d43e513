//! Minimal reverse-mode network core: linear, conv2d (im2col), ReLU, and
//! softmax cross-entropy with label smoothing.
//!
//! Forward passes capture, for every trainable layer, the layer input rows
//! `a_prev` (bias column folded in) and, after backward, the output-gradient
//! rows `g_out` and the weight gradient. Those captures are the raw material
//! for the curvature factors; nothing in this module depends on the
//! preconditioner.
//!
//! Conventions fixed here and relied on elsewhere:
//! - Weights are (out x in(+1)) with the bias as a trailing extra column and
//!   a matching constant-1 column appended to `a_prev`.
//! - Gradients are of the mean-over-batch loss. `g_out` is that output
//!   gradient multiplied by the batch sample count, so row outer products
//!   approximate per-sample curvature scale.
//! - Spatial tensors are carried as (samples x channels*h*w) matrices with
//!   channel-major columns: column (c*h + y)*w + x.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
        has_bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    Relu,
}

impl LayerSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Linear { in_features, out_features, .. } => {
                if in_features == 0 || out_features == 0 {
                    return Err(Error::Dimension(
                        "linear layer dimensions must be positive".into(),
                    ));
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
                    return Err(Error::Dimension(
                        "conv2d layer dimensions must be positive".into(),
                    ));
                }
                if stride == 0 {
                    return Err(Error::Dimension("conv2d stride must be >= 1".into()));
                }
            }
            LayerSpec::Relu => {}
        }
        Ok(())
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, LayerSpec::Relu)
    }

    /// Weight shape (out, in with bias column) for trainable layers.
    pub fn weight_shape(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Linear { in_features, out_features, has_bias } => {
                Some((out_features, in_features + usize::from(has_bias)))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                has_bias,
                ..
            } => Some((
                out_channels,
                in_channels * kernel_h * kernel_w + usize::from(has_bias),
            )),
            LayerSpec::Relu => None,
        }
    }

    fn has_bias(&self) -> bool {
        match *self {
            LayerSpec::Linear { has_bias, .. } | LayerSpec::Conv2d { has_bias, .. } => has_bias,
            LayerSpec::Relu => false,
        }
    }
}

/// A mini-batch of spatial activations: `data` is (samples x c*h*w) with
/// channel-major columns.
#[derive(Clone, Debug)]
pub struct SpatialBatch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Matrix,
}

impl SpatialBatch {
    pub fn new(channels: usize, height: usize, width: usize, data: Matrix) -> Result<Self> {
        if data.cols() != channels * height * width {
            return Err(Error::Dimension(format!(
                "spatial batch has {} columns, expected {}x{}x{} = {}",
                data.cols(),
                channels,
                height,
                width,
                channels * height * width
            )));
        }
        Ok(SpatialBatch { channels, height, width, data })
    }

    pub fn samples(&self) -> usize {
        self.data.rows()
    }

    #[inline]
    fn col(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, s: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data.get(s, self.col(c, y, x))
    }
}

enum Act {
    Flat(Matrix),
    Spatial(SpatialBatch),
}

impl Act {
    fn into_flat(self) -> Matrix {
        match self {
            Act::Flat(m) => m,
            Act::Spatial(s) => s.data,
        }
    }

    fn matrix(&self) -> &Matrix {
        match self {
            Act::Flat(m) => m,
            Act::Spatial(s) => &s.data,
        }
    }

    fn matrix_mut(&mut self) -> &mut Matrix {
        match self {
            Act::Flat(m) => m,
            Act::Spatial(s) => &mut s.data,
        }
    }
}

/// Feed-forward model: an ordered layer list plus one weight matrix per
/// trainable layer.
#[derive(Clone, Debug)]
pub struct Model {
    layers: Vec<LayerSpec>,
    weights: Vec<Option<Matrix>>,
    n_classes: usize,
}

impl Model {
    /// Build a model with seeded uniform init: each weight entry is drawn
    /// from [-b, b] with b = sqrt(6 / fan_in), layer by layer in order.
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("model needs at least one layer".into()));
        }
        for l in &layers {
            l.validate()?;
        }
        // Static conformability: channel/feature agreement where it is
        // knowable without input geometry. Conv after linear would need a
        // flat-to-spatial reshape rule; the model zoo never does it.
        let mut prev_linear_out: Option<usize> = None;
        let mut prev_conv_out: Option<usize> = None;
        let mut seen_linear = false;
        for (i, l) in layers.iter().enumerate() {
            match *l {
                LayerSpec::Linear { in_features, .. } => {
                    if let Some(out) = prev_linear_out {
                        if in_features != out {
                            return Err(Error::Dimension(format!(
                                "layer {i}: linear expects {in_features} features but previous layer produces {out}"
                            )));
                        }
                    }
                    seen_linear = true;
                    prev_linear_out = Some(match *l {
                        LayerSpec::Linear { out_features, .. } => out_features,
                        _ => unreachable!(),
                    });
                    prev_conv_out = None;
                }
                LayerSpec::Conv2d { in_channels, out_channels, .. } => {
                    if seen_linear {
                        return Err(Error::Dimension(format!(
                            "layer {i}: conv2d after a linear layer is not supported"
                        )));
                    }
                    if let Some(c) = prev_conv_out {
                        if in_channels != c {
                            return Err(Error::Dimension(format!(
                                "layer {i}: conv2d expects {in_channels} channels but previous layer produces {c}"
                            )));
                        }
                    }
                    prev_conv_out = Some(out_channels);
                    prev_linear_out = None;
                }
                LayerSpec::Relu => {}
            }
        }
        let n_classes = layers
            .iter()
            .rev()
            .find_map(|l| match *l {
                LayerSpec::Linear { out_features, .. } => Some(out_features),
                LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
                LayerSpec::Relu => None,
            })
            .ok_or_else(|| Error::Dimension("model has no trainable layer".into()))?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layers.len());
        for l in &layers {
            match l.weight_shape() {
                None => weights.push(None),
                Some((rows, cols)) => {
                    let fan_in = cols - usize::from(l.has_bias());
                    let b = (6.0 / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-b, b);
                    let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
                    weights.push(Some(Matrix::new(rows, cols, data)?));
                }
            }
        }
        Ok(Model { layers, weights, n_classes })
    }

    /// Multi-layer perceptron: linear+ReLU for each hidden width, then a
    /// linear classifier head. All layers carry biases.
    pub fn mlp(in_features: usize, hidden: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = in_features;
        for &h in hidden {
            layers.push(LayerSpec::Linear { in_features: prev, out_features: h, has_bias: true });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::Linear { in_features: prev, out_features: n_classes, has_bias: true });
        Model::new(layers, seed)
    }

    /// Small convolutional net: two 3x3 conv layers (the second at stride 2)
    /// and two linear layers. Input images must be (in_channels, h, w).
    pub fn smallconv(in_channels: usize, h: usize, w: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let c1 = 6;
        let c2 = 8;
        let h2 = conv_out_dim(h, 3, 1, 1)?;
        let w2 = conv_out_dim(w, 3, 1, 1)?;
        let h3 = conv_out_dim(h2, 3, 2, 1)?;
        let w3 = conv_out_dim(w2, 3, 2, 1)?;
        let layers = vec![
            LayerSpec::Conv2d {
                in_channels,
                out_channels: c1,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                padding: 1,
                has_bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: c1,
                out_channels: c2,
                kernel_h: 3,
                kernel_w: 3,
                stride: 2,
                padding: 1,
                has_bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::Linear { in_features: c2 * h3 * w3, out_features: 32, has_bias: true },
            LayerSpec::Relu,
            LayerSpec::Linear { in_features: 32, out_features: n_classes, has_bias: true },
        ];
        Model::new(layers, seed)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Indices (into `layers`) of trainable layers, in order.
    pub fn trainable_ids(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_trainable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn weight(&self, layer_id: usize) -> Option<&Matrix> {
        self.weights.get(layer_id).and_then(|w| w.as_ref())
    }

    pub fn weight_mut(&mut self, layer_id: usize) -> Option<&mut Matrix> {
        self.weights.get_mut(layer_id).and_then(|w| w.as_mut())
    }

    /// Total scalar parameter count.
    pub fn n_params(&self) -> usize {
        self.weights
            .iter()
            .flatten()
            .map(|w| w.rows() * w.cols())
            .sum()
    }

    /// Interpret a flat input batch for the first layer: spatial with
    /// inferred square images when the model starts with conv2d, flat
    /// otherwise.
    fn input_act(&self, batch: &Matrix) -> Result<Act> {
        let first_trainable = self
            .layers
            .iter()
            .find(|l| l.is_trainable())
            .expect("validated at construction");
        match *first_trainable {
            LayerSpec::Conv2d { in_channels, .. } => {
                let f = batch.cols();
                if f % in_channels != 0 {
                    return Err(Error::Dimension(format!(
                        "batch features {f} not divisible by {in_channels} input channels"
                    )));
                }
                let hw = f / in_channels;
                let side = (hw as f64).sqrt().round() as usize;
                if side * side != hw {
                    return Err(Error::Dimension(format!(
                        "cannot infer square images: {hw} pixels per channel is not a perfect square"
                    )));
                }
                Ok(Act::Spatial(SpatialBatch::new(in_channels, side, side, batch.clone())?))
            }
            _ => Ok(Act::Flat(batch.clone())),
        }
    }

    fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.weights
            .iter()
            .flatten()
            .map(|w| (w.rows(), w.cols()))
            .collect()
    }
}

/// Per-trainable-layer capture: layer input rows, and after backward the
/// output-gradient rows and the weight gradient.
#[derive(Clone, Debug)]
pub struct LayerCapture {
    pub layer_id: usize,
    /// (samples*positions x fan_in(+1)); the trailing column is all ones
    /// when the layer has a bias.
    pub a_prev: Matrix,
    /// (samples*positions x fan_out): mean-loss output gradient scaled by
    /// the batch sample count. Filled by backward.
    pub g_out: Option<Matrix>,
    /// Weight gradient of the mean loss, same shape as the weight. Filled by
    /// backward.
    pub grad: Option<Matrix>,
}

enum Stash {
    Linear { input_spatial: Option<(usize, usize, usize)> },
    Conv { in_c: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    Relu { out: Matrix },
}

/// Everything recorded by one forward pass, consumed by backward.
pub struct BatchCapture {
    pub layers: Vec<LayerCapture>,
    stash: Vec<Stash>,
    probs: Matrix,
    targets: Matrix,
    batch_size: usize,
    weight_shapes: Vec<(usize, usize)>,
}

impl BatchCapture {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Softmax probabilities of the forward batch, (samples x classes).
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn capture_for(&self, layer_id: usize) -> Option<&LayerCapture> {
        self.layers.iter().find(|c| c.layer_id == layer_id)
    }
}

/// Number of output positions along one spatial dimension.
fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Dimension(format!(
            "kernel {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unroll convolution windows into rows: one row per (sample, output
/// position), columns ordered channel-major then kernel row then kernel
/// column, with a trailing ones column when the layer has a bias.
pub fn im2col(input: &SpatialBatch, spec: &LayerSpec) -> Result<Matrix> {
    let (in_c, kh, kw, stride, pad, has_bias) = match *spec {
        LayerSpec::Conv2d {
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            has_bias,
            ..
        } => (in_channels, kernel_h, kernel_w, stride, padding, has_bias),
        _ => return Err(Error::Dimension("im2col needs a conv2d layer".into())),
    };
    if input.channels != in_c {
        return Err(Error::Dimension(format!(
            "input has {} channels, conv2d expects {in_c}",
            input.channels
        )));
    }
    let out_h = conv_out_dim(input.height, kh, stride, pad)?;
    let out_w = conv_out_dim(input.width, kw, stride, pad)?;
    let n = input.samples();
    let cols = in_c * kh * kw + usize::from(has_bias);
    let mut out = Matrix::zeros(n * out_h * out_w, cols);
    for s in 0..n {
        for oh in 0..out_h {
            for ow in 0..out_w {
                let row = (s * out_h + oh) * out_w + ow;
                for c in 0..in_c {
                    for ki in 0..kh {
                        let iy = (oh * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= input.height as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ix = (ow * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= input.width as isize {
                                continue;
                            }
                            let col = (c * kh + ki) * kw + kj;
                            out.set(row, col, input.get(s, c, iy as usize, ix as usize));
                        }
                    }
                }
                if has_bias {
                    out.set(row, cols - 1, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of im2col: scatter-add row gradients back onto the input tensor.
fn col2im(
    d_rows: &Matrix,
    n: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> SpatialBatch {
    let mut data = Matrix::zeros(n, in_c * in_h * in_w);
    for s in 0..n {
        for oh in 0..out_h {
            for ow in 0..out_w {
                let row = (s * out_h + oh) * out_w + ow;
                for c in 0..in_c {
                    for ki in 0..kh {
                        let iy = (oh * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ix = (ow * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            let col = (c * kh + ki) * kw + kj;
                            let dst = (c * in_h + iy as usize) * in_w + ix as usize;
                            let v = data.get(s, dst) + d_rows.get(row, col);
                            data.set(s, dst, v);
                        }
                    }
                }
            }
        }
    }
    SpatialBatch { channels: in_c, height: in_h, width: in_w, data }
}

/// Append a constant-1 column.
fn with_ones_column(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols() + 1);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.set(i, j, m.get(i, j));
        }
        out.set(i, m.cols(), 1.0);
    }
    out
}

/// Drop the trailing bias column of a weight for input-gradient propagation.
fn without_last_column(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols() - 1);
    for i in 0..m.rows() {
        for j in 0..m.cols() - 1 {
            out.set(i, j, m.get(i, j));
        }
    }
    out
}

fn layer_forward(
    model: &Model,
    layer_id: usize,
    act: Act,
    captures: Option<&mut Vec<LayerCapture>>,
    stash: Option<&mut Vec<Stash>>,
) -> Result<Act> {
    let spec = &model.layers[layer_id];
    match *spec {
        LayerSpec::Linear { in_features, .. } => {
            let input_spatial = match &act {
                Act::Spatial(s) => Some((s.channels, s.height, s.width)),
                Act::Flat(_) => None,
            };
            let x = act.into_flat();
            if x.cols() != in_features {
                return Err(Error::Dimension(format!(
                    "layer {layer_id}: linear expects {in_features} features, got {}",
                    x.cols()
                )));
            }
            let a_prev = if spec.has_bias() { with_ones_column(&x) } else { x };
            let w = model.weights[layer_id].as_ref().expect("trainable layer has weights");
            let z = a_prev.matmul(&w.transpose())?;
            if let Some(c) = captures {
                c.push(LayerCapture { layer_id, a_prev, g_out: None, grad: None });
            }
            if let Some(st) = stash {
                st.push(Stash::Linear { input_spatial });
            }
            Ok(Act::Flat(z))
        }
        LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, stride, padding, .. } => {
            let sp = match act {
                Act::Spatial(s) => s,
                Act::Flat(_) => {
                    return Err(Error::Dimension(format!(
                        "layer {layer_id}: conv2d needs spatial input"
                    )));
                }
            };
            let out_h = conv_out_dim(sp.height, kernel_h, stride, padding)?;
            let out_w = conv_out_dim(sp.width, kernel_w, stride, padding)?;
            let a_prev = im2col(&sp, spec)?;
            let w = model.weights[layer_id].as_ref().expect("trainable layer has weights");
            let z_rows = a_prev.matmul(&w.transpose())?;
            let n = sp.samples();
            let mut out = Matrix::zeros(n, out_channels * out_h * out_w);
            for s in 0..n {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let row = (s * out_h + oh) * out_w + ow;
                        for oc in 0..out_channels {
                            out.set(s, (oc * out_h + oh) * out_w + ow, z_rows.get(row, oc));
                        }
                    }
                }
            }
            if let Some(c) = captures {
                c.push(LayerCapture { layer_id, a_prev, g_out: None, grad: None });
            }
            if let Some(st) = stash {
                st.push(Stash::Conv {
                    in_c: sp.channels,
                    in_h: sp.height,
                    in_w: sp.width,
                    out_h,
                    out_w,
                });
            }
            Ok(Act::Spatial(SpatialBatch {
                channels: out_channels,
                height: out_h,
                width: out_w,
                data: out,
            }))
        }
        LayerSpec::Relu => {
            let mut act = act;
            {
                let m = act.matrix_mut();
                for v in m.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            if let Some(st) = stash {
                st.push(Stash::Relu { out: act.matrix().clone() });
            }
            Ok(act)
        }
    }
}

/// Run the model and return final-layer logits, without any capture.
pub fn predict(model: &Model, batch: &Matrix) -> Result<Matrix> {
    let mut act = model.input_act(batch)?;
    for layer_id in 0..model.layers.len() {
        act = layer_forward(model, layer_id, act, None, None)?;
    }
    match act {
        Act::Flat(m) => Ok(m),
        Act::Spatial(_) => Err(Error::Dimension(
            "model output is spatial; a final linear layer is required".into(),
        )),
    }
}

/// Softmax cross-entropy with label smoothing. Targets mix the one-hot label
/// with the uniform distribution: t = (1-s)*onehot + s/C.
fn smoothed_loss(logits: &Matrix, labels: &[usize], smoothing: f64) -> Result<(f64, Matrix, Matrix)> {
    let n = logits.rows();
    let c = logits.cols();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Value(format!("label {bad} out of range for {c} classes")));
    }
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(Error::Value(format!("label smoothing {smoothing} outside [0, 1]")));
    }
    let mut probs = Matrix::zeros(n, c);
    let mut targets = Matrix::zeros(n, c);
    let uniform = smoothing / c as f64;
    let mut loss = 0.0;
    for i in 0..n {
        let row_max = (0..c).fold(f64::NEG_INFINITY, |m, j| m.max(logits.get(i, j)));
        let mut denom = 0.0;
        for j in 0..c {
            denom += (logits.get(i, j) - row_max).exp();
        }
        let log_denom = denom.ln();
        for j in 0..c {
            let log_p = logits.get(i, j) - row_max - log_denom;
            probs.set(i, j, log_p.exp());
            let t = uniform + if j == labels[i] { 1.0 - smoothing } else { 0.0 };
            targets.set(i, j, t);
            if t > 0.0 {
                loss -= t * log_p;
            }
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::Value(format!("non-finite loss {loss}")));
    }
    Ok((loss, probs, targets))
}

/// Forward pass with capture: returns the mean smoothed cross-entropy loss
/// and a capture holding per-layer inputs plus everything backward needs.
pub fn forward(
    model: &Model,
    batch: &Matrix,
    labels: &[usize],
    smoothing: f64,
) -> Result<(f64, BatchCapture)> {
    if batch.rows() == 0 {
        return Err(Error::Dimension("batch must contain at least one sample".into()));
    }
    let mut captures = Vec::new();
    let mut stash = Vec::new();
    let mut act = model.input_act(batch)?;
    for layer_id in 0..model.layers.len() {
        act = layer_forward(model, layer_id, act, Some(&mut captures), Some(&mut stash))?;
    }
    let logits = match act {
        Act::Flat(m) => m,
        Act::Spatial(_) => {
            return Err(Error::Dimension(
                "model output is spatial; a final linear layer is required".into(),
            ));
        }
    };
    let (loss, probs, targets) = smoothed_loss(&logits, labels, smoothing)?;
    Ok((
        loss,
        BatchCapture {
            layers: captures,
            stash,
            probs,
            targets,
            batch_size: batch.rows(),
            weight_shapes: model.weight_shapes(),
        },
    ))
}

/// Backward pass: fills `g_out` and `grad` on every trainable-layer capture
/// and returns the weight gradients in trainable-layer order. Gradients are
/// of the mean-over-batch loss.
pub fn backward(model: &Model, cap: &mut BatchCapture) -> Result<Vec<Matrix>> {
    if cap.weight_shapes != model.weight_shapes() {
        return Err(Error::State(
            "capture was produced by a model with different weight shapes".into(),
        ));
    }
    let n = cap.batch_size as f64;
    // d(mean loss)/d(logits) = (probs - targets) / n.
    let mut d_act = Act::Flat(cap.probs.sub(&cap.targets)?.scale(1.0 / n));

    let mut grads_rev: Vec<Matrix> = Vec::new();
    let mut stash_iter = cap.stash.iter().rev();
    let mut capture_iter = cap.layers.iter_mut().rev();
    for layer_id in (0..model.layers.len()).rev() {
        let spec = &model.layers[layer_id];
        let st = stash_iter.next().ok_or_else(|| {
            Error::State("capture is missing layer records for this model".into())
        })?;
        match (*spec).clone() {
            LayerSpec::Relu => {
                let out = match st {
                    Stash::Relu { out } => out,
                    _ => return Err(Error::State("layer record kind mismatch".into())),
                };
                let m = d_act.matrix_mut();
                if m.rows() != out.rows() || m.cols() != out.cols() {
                    return Err(Error::State("relu record shape mismatch".into()));
                }
                for (d, &o) in m.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            LayerSpec::Linear { .. } => {
                let input_spatial = match st {
                    Stash::Linear { input_spatial } => *input_spatial,
                    _ => return Err(Error::State("layer record kind mismatch".into())),
                };
                let capture = capture_iter
                    .next()
                    .ok_or_else(|| Error::State("missing trainable-layer capture".into()))?;
                if capture.layer_id != layer_id {
                    return Err(Error::State("capture order does not match model".into()));
                }
                let dz = d_act.into_flat();
                let w = model.weights[layer_id].as_ref().expect("trainable");
                let grad = dz.transpose().matmul(&capture.a_prev)?;
                let w_in = if spec.has_bias() { without_last_column(w) } else { w.clone() };
                let dx = dz.matmul(&w_in)?;
                capture.g_out = Some(dz.scale(n));
                capture.grad = Some(grad.clone());
                grads_rev.push(grad);
                d_act = match input_spatial {
                    Some((c, h, w_)) => Act::Spatial(SpatialBatch::new(c, h, w_, dx)?),
                    None => Act::Flat(dx),
                };
            }
            LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, stride, padding, .. } => {
                let (in_c, in_h, in_w, out_h, out_w) = match st {
                    Stash::Conv { in_c, in_h, in_w, out_h, out_w } => {
                        (*in_c, *in_h, *in_w, *out_h, *out_w)
                    }
                    _ => return Err(Error::State("layer record kind mismatch".into())),
                };
                let capture = capture_iter
                    .next()
                    .ok_or_else(|| Error::State("missing trainable-layer capture".into()))?;
                if capture.layer_id != layer_id {
                    return Err(Error::State("capture order does not match model".into()));
                }
                let d_sp = match d_act {
                    Act::Spatial(s) => s,
                    Act::Flat(_) => {
                        return Err(Error::State("conv2d backward needs spatial gradient".into()))
                    }
                };
                let samples = d_sp.samples();
                // Spatial gradient -> rows aligned with the im2col layout.
                let mut dz_rows = Matrix::zeros(samples * out_h * out_w, out_channels);
                for s in 0..samples {
                    for oh in 0..out_h {
                        for ow in 0..out_w {
                            let row = (s * out_h + oh) * out_w + ow;
                            for oc in 0..out_channels {
                                dz_rows.set(row, oc, d_sp.get(s, oc, oh, ow));
                            }
                        }
                    }
                }
                let w = model.weights[layer_id].as_ref().expect("trainable");
                let grad = dz_rows.transpose().matmul(&capture.a_prev)?;
                let w_in = if spec.has_bias() { without_last_column(w) } else { w.clone() };
                let d_rows = dz_rows.matmul(&w_in)?;
                capture.g_out = Some(dz_rows.scale(n));
                capture.grad = Some(grad.clone());
                grads_rev.push(grad);
                d_act = Act::Spatial(col2im(
                    &d_rows, samples, in_c, in_h, in_w, kernel_h, kernel_w, stride, padding,
                    out_h, out_w,
                ));
            }
        }
    }
    grads_rev.reverse();
    Ok(grads_rev)
}

/// Fraction of samples whose argmax logit matches the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} samples",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for i in 0..logits.rows() {
        let mut best = 0usize;
        for j in 1..logits.cols() {
            if logits.get(i, j) > logits.get(i, best) {
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / logits.rows() as f64)
}
