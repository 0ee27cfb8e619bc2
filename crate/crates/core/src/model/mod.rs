//! Differentiable classifiers: reference architectures, forward/backward
//! evaluation, and probability outputs.
//!
//! Architectures are built from a descriptor string so larger networks can be
//! registered later without touching call sites:
//!
//! * `linear` — single dense layer to the class logits,
//! * `mlp:{L}x{W}` — `L` hidden ReLU layers of width `W`,
//! * `cnn:{B}x{C}` — `B` blocks of conv3x3/ReLU/maxpool with `C` channels,
//!   then a dense head (image-shaped inputs only).

mod layers;
pub mod optim;

pub use layers::{Feat, Layer};
pub use optim::{sgd_step, OptimState};

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MatError, Result};

/// Floor applied to probabilities before they enter any logarithm, and to
/// softmax outputs so probability entries stay strictly positive.
pub const PROB_FLOOR: f64 = 1e-12;

/// Shape of a single input example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    Flat { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn flat(dim: usize) -> Self {
        InputShape::Flat { dim }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        InputShape::Image { channels, height, width }
    }

    /// Flattened dimensionality of one example.
    pub fn dim(&self) -> usize {
        match *self {
            InputShape::Flat { dim } => dim,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, InputShape::Image { .. })
    }
}

/// A probability distribution over `K` classes: entries strictly positive,
/// summing to one within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Array1<f64>);

impl ProbVector {
    /// Entries are floored at [`PROB_FLOOR`] so degenerate one-hot inputs stay
    /// strictly positive, then validated.
    pub fn new(mut values: Array1<f64>) -> Result<Self> {
        values.mapv_inplace(|v| v.max(PROB_FLOOR));
        validate_prob_row(values.view(), 0)?;
        Ok(ProbVector(values))
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from_vec(values))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A batch of probability rows, one `ProbVector` per example.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch(Array2<f64>);

impl ProbBatch {
    /// Entries are floored at [`PROB_FLOOR`], then validated row by row.
    pub fn new(mut values: Array2<f64>) -> Result<Self> {
        values.mapv_inplace(|v| v.max(PROB_FLOOR));
        for (i, row) in values.rows().into_iter().enumerate() {
            validate_prob_row(row, i)?;
        }
        Ok(ProbBatch(values))
    }

    /// Softmax with max-subtraction; outputs are floored at [`PROB_FLOOR`].
    pub fn from_logits(logits: &Array2<f64>) -> Self {
        let mut out = logits.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| (v / sum).max(PROB_FLOOR));
        }
        ProbBatch(out)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ProbVector {
        ProbVector(self.0.row(i).to_owned())
    }

    /// Predicted class per row: argmax with lowest-index tie break.
    pub fn predictions(&self) -> Vec<usize> {
        self.0
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0usize;
                let mut best_v = row[0];
                for (k, &v) in row.iter().enumerate().skip(1) {
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

fn validate_prob_row(row: ndarray::ArrayView1<'_, f64>, index: usize) -> Result<()> {
    if row.is_empty() {
        return Err(MatError::shape("probability vector", "K >= 1 entries", "0"));
    }
    let sum: f64 = row.sum();
    if !row.iter().all(|&v| v.is_finite() && v > 0.0 && v <= 1.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(MatError::Numeric(format!(
            "row {index} is not a probability distribution (sum {sum:.9})"
        )));
    }
    Ok(())
}

/// Cached activations from one forward pass, consumed by [`Classifier::backward`].
pub struct ForwardTrace {
    /// Input to each layer, in layer order.
    inputs: Vec<Feat>,
    logits: Array2<f64>,
    probs: Array2<f64>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn probs(&self) -> ProbBatch {
        ProbBatch(self.probs.clone())
    }
}

/// A feed-forward classifier with explicit backpropagation.
///
/// Immutable during forward/gradient evaluation; parameter updates go through
/// [`sgd_step`] and require exclusive access.
#[derive(Debug, Clone)]
pub struct Classifier {
    descriptor: String,
    input_shape: InputShape,
    num_classes: usize,
    layers: Vec<Layer>,
}

impl Classifier {
    /// Build a network from its architecture descriptor, with fan-in-scaled
    /// uniform initialization drawn from `rng`.
    pub fn new(
        descriptor: &str,
        input_shape: InputShape,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(MatError::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let layers = build_layers(descriptor, input_shape, num_classes, rng)?;
        Ok(Classifier {
            descriptor: descriptor.to_string(),
            input_shape,
            num_classes,
            layers,
        })
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn input_shape(&self) -> InputShape {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_shape.dim() {
            return Err(MatError::shape(
                "model input",
                format!("{} features", self.input_shape.dim()),
                format!("{}", x.ncols()),
            ));
        }
        Ok(())
    }

    fn input_feat(&self, x: &Array2<f64>) -> Feat {
        match self.input_shape {
            InputShape::Flat { .. } => Feat::Flat(x.clone()),
            InputShape::Image { channels, height, width } => {
                let b = x.nrows();
                let img = x
                    .to_owned()
                    .into_shape_with_order((b, channels, height, width))
                    .expect("row-major reshape");
                Feat::Image(img)
            }
        }
    }

    /// Forward pass producing class probabilities.
    pub fn forward_probs(&self, x: &Array2<f64>) -> Result<ProbBatch> {
        Ok(self.forward_trace(x)?.probs())
    }

    /// Forward pass that also caches the activations needed for [`backward`].
    ///
    /// [`backward`]: Classifier::backward
    pub fn forward_trace(&self, x: &Array2<f64>) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut cur = self.input_feat(x);
        let mut inputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(&cur)?;
            if !next.is_finite() {
                return Err(MatError::Numeric(format!(
                    "non-finite activations after layer {i} ({})",
                    layer.kind()
                )));
            }
            inputs.push(cur);
            cur = next;
        }
        let logits = match cur {
            Feat::Flat(a) => a,
            Feat::Image(_) => {
                return Err(MatError::Config(format!(
                    "architecture '{}' does not end in a dense head",
                    self.descriptor
                )))
            }
        };
        if logits.ncols() != self.num_classes {
            return Err(MatError::shape(
                "model output",
                format!("{} logits", self.num_classes),
                format!("{}", logits.ncols()),
            ));
        }
        let probs = ProbBatch::from_logits(&logits);
        Ok(ForwardTrace { inputs, logits, probs: probs.0 })
    }

    /// Backpropagate a gradient with respect to the output *probabilities*
    /// through the softmax and all layers. Returns the parameter gradients
    /// (one array per parameter tensor, in [`param_arrays`] order) and the
    /// gradient with respect to the input batch.
    ///
    /// [`param_arrays`]: Classifier::param_arrays
    pub fn backward(&self, trace: &ForwardTrace, dprobs: &Array2<f64>) -> Result<(Vec<ArrayD<f64>>, Array2<f64>)> {
        if dprobs.dim() != trace.probs.dim() {
            return Err(MatError::shape(
                "backward",
                format!("{:?}", trace.probs.dim()),
                format!("{:?}", dprobs.dim()),
            ));
        }
        // Softmax Jacobian: dz_i = p_i * (g_i - sum_k g_k p_k).
        let mut dlogits = Array2::<f64>::zeros(trace.logits.raw_dim());
        for ((mut dz, g), p) in dlogits
            .rows_mut()
            .into_iter()
            .zip(dprobs.rows())
            .zip(trace.probs.rows())
        {
            let dot: f64 = g.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
            for (i, d) in dz.iter_mut().enumerate() {
                *d = p[i] * (g[i] - dot);
            }
        }

        let mut grad = Feat::Flat(dlogits);
        let mut param_grads_rev: Vec<ArrayD<f64>> = Vec::new();
        for (layer, input) in self.layers.iter().zip(trace.inputs.iter()).rev() {
            let (pg, gin) = layer.backward(input, &grad)?;
            for g in pg.into_iter().rev() {
                param_grads_rev.push(g);
            }
            grad = gin;
        }
        param_grads_rev.reverse();
        let dinput = match grad {
            Feat::Flat(a) => a,
            Feat::Image(img) => {
                let b = img.shape()[0];
                let d = img.len() / b;
                img.into_shape_with_order((b, d)).expect("row-major reshape")
            }
        };
        Ok((param_grads_rev, dinput))
    }

    /// Copies of all parameter tensors, in deterministic layer order.
    pub fn param_arrays(&self) -> Vec<ArrayD<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    out.push(weight.clone().into_dyn());
                    out.push(bias.clone().into_dyn());
                }
                Layer::Conv { weight, bias } => {
                    out.push(weight.clone().into_dyn());
                    out.push(bias.clone().into_dyn());
                }
                _ => {}
            }
        }
        out
    }

    /// Overwrite all parameters from arrays in [`param_arrays`] order.
    ///
    /// [`param_arrays`]: Classifier::param_arrays
    pub fn set_param_arrays(&mut self, params: &[ArrayD<f64>]) -> Result<()> {
        let mut it = params.iter();
        let mut take = |shape: &[usize], what: &str| -> Result<ArrayD<f64>> {
            let arr = it
                .next()
                .ok_or_else(|| MatError::shape("set params", "more arrays", "exhausted"))?;
            if arr.shape() != shape {
                return Err(MatError::shape(what, format!("{shape:?}"), format!("{:?}", arr.shape())));
            }
            Ok(arr.clone())
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    let w = take(weight.shape(), "dense weight")?;
                    let b = take(bias.shape(), "dense bias")?;
                    *weight = w.into_dimensionality().expect("checked shape");
                    *bias = b.into_dimensionality().expect("checked shape");
                }
                Layer::Conv { weight, bias } => {
                    let w = take(weight.shape(), "conv weight")?;
                    let b = take(bias.shape(), "conv bias")?;
                    *weight = w.into_dimensionality().expect("checked shape");
                    *bias = b.into_dimensionality().expect("checked shape");
                }
                _ => {}
            }
        }
        if it.next().is_some() {
            return Err(MatError::shape("set params", "exact array count", "extra arrays"));
        }
        Ok(())
    }

    /// Mutable slices over every parameter tensor, in [`param_arrays`] order.
    ///
    /// [`param_arrays`]: Classifier::param_arrays
    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    out.push(weight.as_slice_mut().expect("contiguous"));
                    out.push(bias.as_slice_mut().expect("contiguous"));
                }
                Layer::Conv { weight, bias } => {
                    out.push(weight.as_slice_mut().expect("contiguous"));
                    out.push(bias.as_slice_mut().expect("contiguous"));
                }
                _ => {}
            }
        }
        out
    }

    /// Predicted class labels for a batch.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        Ok(self.forward_probs(x)?.predictions())
    }

    /// Fraction of the batch classified correctly.
    pub fn accuracy(&self, x: &Array2<f64>, y: &[usize]) -> Result<f64> {
        let preds = self.predict(x)?;
        if preds.len() != y.len() {
            return Err(MatError::shape("accuracy", format!("{} labels", preds.len()), format!("{}", y.len())));
        }
        let hits = preds.iter().zip(y).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / y.len().max(1) as f64)
    }
}

/// Gradient of the per-example scalar loss with respect to the input batch.
///
/// The returned array has the same shape as `x`; row `i` is the gradient of
/// `loss(model(x_i), y_i)` (no batch averaging). Model parameters are not
/// touched.
pub fn input_gradient(
    model: &Classifier,
    loss: &crate::losses::InnerLoss,
    x: &Array2<f64>,
    y: &[usize],
) -> Result<Array2<f64>> {
    let trace = model.forward_trace(x)?;
    let dprobs = loss.grad_probs_per_example(&trace.probs(), y)?;
    let (_, dx) = model.backward(&trace, &dprobs)?;
    Ok(dx)
}

fn uniform_array<D: ndarray::Dimension>(
    shape: impl ndarray::ShapeBuilder<Dim = D>,
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> ndarray::Array<f64, D> {
    ndarray::Array::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

fn dense(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Layer {
    let bound = 1.0 / (in_dim as f64).sqrt();
    Layer::Dense {
        weight: uniform_array((out_dim, in_dim), bound, rng),
        bias: uniform_array(out_dim, bound, rng),
    }
}

fn conv(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Layer {
    let bound = 1.0 / ((in_c * 9) as f64).sqrt();
    Layer::Conv {
        weight: uniform_array((out_c, in_c, 3, 3), bound, rng),
        bias: uniform_array(out_c, bound, rng),
    }
}

fn build_layers(
    descriptor: &str,
    input_shape: InputShape,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Layer>> {
    let bad = |msg: String| MatError::Config(msg);
    let parse_pair = |spec: &str, what: &str| -> Result<(usize, usize)> {
        let (a, b) = spec
            .split_once('x')
            .ok_or_else(|| bad(format!("architecture '{descriptor}': expected {what} as AxB")))?;
        let a: usize = a
            .parse()
            .map_err(|_| bad(format!("architecture '{descriptor}': bad count '{a}'")))?;
        let b: usize = b
            .parse()
            .map_err(|_| bad(format!("architecture '{descriptor}': bad width '{b}'")))?;
        if a == 0 || b == 0 {
            return Err(bad(format!("architecture '{descriptor}': sizes must be positive")));
        }
        Ok((a, b))
    };

    let mut layers = Vec::new();
    if let Some(rest) = descriptor.strip_prefix("mlp:") {
        let (depth, width) = parse_pair(rest, "hidden layout")?;
        if input_shape.is_image() {
            layers.push(Layer::Flatten);
        }
        let mut in_dim = input_shape.dim();
        for _ in 0..depth {
            layers.push(dense(in_dim, width, rng));
            layers.push(Layer::Relu);
            in_dim = width;
        }
        layers.push(dense(in_dim, classes, rng));
    } else if let Some(rest) = descriptor.strip_prefix("cnn:") {
        let (blocks, channels) = parse_pair(rest, "block layout")?;
        let (mut c, mut h, mut w) = match input_shape {
            InputShape::Image { channels, height, width } => (channels, height, width),
            InputShape::Flat { .. } => {
                return Err(bad(format!(
                    "architecture '{descriptor}' requires image-shaped inputs"
                )))
            }
        };
        for _ in 0..blocks {
            layers.push(conv(c, channels, rng));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool);
            c = channels;
            h /= 2;
            w /= 2;
            if h == 0 || w == 0 {
                return Err(bad(format!(
                    "architecture '{descriptor}': input too small for {blocks} pooling blocks"
                )));
            }
        }
        layers.push(Layer::Flatten);
        layers.push(dense(c * h * w, classes, rng));
    } else if descriptor == "linear" {
        if input_shape.is_image() {
            layers.push(Layer::Flatten);
        }
        layers.push(dense(input_shape.dim(), classes, rng));
    } else {
        return Err(bad(format!("unknown architecture descriptor '{descriptor}'")));
    }
    Ok(layers)
}
