//! Layer primitives with explicit forward/backward rules.

use ndarray::{Array1, Array2, Array4, ArrayD};

use crate::error::{MatError, Result};

/// Activations flowing through a network: flat feature rows or image stacks.
#[derive(Debug, Clone)]
pub enum Feat {
    Flat(Array2<f64>),
    Image(Array4<f64>),
}

impl Feat {
    pub fn batch_len(&self) -> usize {
        match self {
            Feat::Flat(a) => a.nrows(),
            Feat::Image(a) => a.shape()[0],
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Feat::Flat(_) => "flat",
            Feat::Image(_) => "image",
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Feat::Flat(a) => a.iter().all(|v| v.is_finite()),
            Feat::Image(a) => a.iter().all(|v| v.is_finite()),
        }
    }

    fn expect_flat(&self, ctx: &str) -> Result<&Array2<f64>> {
        match self {
            Feat::Flat(a) => Ok(a),
            Feat::Image(_) => Err(MatError::shape(ctx, "flat activations", self.kind())),
        }
    }

    fn expect_image(&self, ctx: &str) -> Result<&Array4<f64>> {
        match self {
            Feat::Image(a) => Ok(a),
            Feat::Flat(_) => Err(MatError::shape(ctx, "image activations", self.kind())),
        }
    }
}

/// A single differentiable layer.
///
/// Convolutions are fixed at 3x3 kernels, stride 1, zero padding 1; pooling is
/// 2x2 max with stride 2. That is all the reference architectures need.
#[derive(Debug, Clone)]
pub enum Layer {
    /// Fully connected: `y = x W^T + b`, weight shape `(out, in)`.
    Dense { weight: Array2<f64>, bias: Array1<f64> },
    Relu,
    /// 3x3 same-padding convolution, weight shape `(out_c, in_c, 3, 3)`.
    Conv { weight: Array4<f64>, bias: Array1<f64> },
    /// 2x2 max pooling with stride 2 (floor semantics on odd sizes).
    MaxPool,
    /// Reshape `(b, c, h, w)` image activations to `(b, c*h*w)` rows.
    Flatten,
}

/// Parameter gradients for one layer, in `[weight, bias]` order.
pub type LayerGrads = Vec<ArrayD<f64>>;

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::Conv { .. } => "conv",
            Layer::MaxPool => "maxpool",
            Layer::Flatten => "flatten",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { weight, bias } => weight.len() + bias.len(),
            Layer::Conv { weight, bias } => weight.len() + bias.len(),
            _ => 0,
        }
    }

    pub fn forward(&self, input: &Feat) -> Result<Feat> {
        match self {
            Layer::Dense { weight, bias } => {
                let x = input.expect_flat("dense forward")?;
                if x.ncols() != weight.ncols() {
                    return Err(MatError::shape(
                        "dense forward",
                        format!("{} input features", weight.ncols()),
                        format!("{}", x.ncols()),
                    ));
                }
                let mut out = x.dot(&weight.t());
                out += bias;
                Ok(Feat::Flat(out))
            }
            Layer::Relu => Ok(match input {
                Feat::Flat(a) => Feat::Flat(a.mapv(|v| v.max(0.0))),
                Feat::Image(a) => Feat::Image(a.mapv(|v| v.max(0.0))),
            }),
            Layer::Conv { weight, bias } => {
                let x = input.expect_image("conv forward")?;
                Ok(Feat::Image(conv3x3_forward(x, weight, bias)?))
            }
            Layer::MaxPool => {
                let x = input.expect_image("maxpool forward")?;
                Ok(Feat::Image(maxpool2_forward(x)?))
            }
            Layer::Flatten => {
                let x = input.expect_image("flatten forward")?;
                let (b, c, h, w) = dims4(x);
                let flat = x
                    .to_owned()
                    .into_shape_with_order((b, c * h * w))
                    .expect("contiguous image activations");
                Ok(Feat::Flat(flat))
            }
        }
    }

    /// Backward pass: given the cached layer input and the gradient of the
    /// loss with respect to this layer's output, produce the parameter
    /// gradients (empty for parameter-free layers) and the gradient with
    /// respect to the input.
    pub fn backward(&self, input: &Feat, grad_out: &Feat) -> Result<(LayerGrads, Feat)> {
        match self {
            Layer::Dense { weight, .. } => {
                let x = input.expect_flat("dense backward")?;
                let g = grad_out.expect_flat("dense backward")?;
                let dw = g.t().dot(x);
                let db = g.sum_axis(ndarray::Axis(0));
                let dx = g.dot(weight);
                Ok((vec![dw.into_dyn(), db.into_dyn()], Feat::Flat(dx)))
            }
            Layer::Relu => {
                let grad = match (input, grad_out) {
                    (Feat::Flat(x), Feat::Flat(g)) => {
                        let mut dx = g.clone();
                        dx.zip_mut_with(x, |d, &v| {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        });
                        Feat::Flat(dx)
                    }
                    (Feat::Image(x), Feat::Image(g)) => {
                        let mut dx = g.clone();
                        dx.zip_mut_with(x, |d, &v| {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        });
                        Feat::Image(dx)
                    }
                    _ => return Err(MatError::shape("relu backward", input.kind(), grad_out.kind())),
                };
                Ok((vec![], grad))
            }
            Layer::Conv { weight, .. } => {
                let x = input.expect_image("conv backward")?;
                let g = grad_out.expect_image("conv backward")?;
                let (dw, db, dx) = conv3x3_backward(x, weight, g);
                Ok((vec![dw.into_dyn(), db.into_dyn()], Feat::Image(dx)))
            }
            Layer::MaxPool => {
                let x = input.expect_image("maxpool backward")?;
                let g = grad_out.expect_image("maxpool backward")?;
                Ok((vec![], Feat::Image(maxpool2_backward(x, g))))
            }
            Layer::Flatten => {
                let x = input.expect_image("flatten backward")?;
                let g = grad_out.expect_flat("flatten backward")?;
                let (b, c, h, w) = dims4(x);
                let dx = g
                    .to_owned()
                    .into_shape_with_order((b, c, h, w))
                    .expect("flatten gradient reshape");
                Ok((vec![], Feat::Image(dx)))
            }
        }
    }
}

fn dims4(a: &Array4<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

fn conv3x3_forward(x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Result<Array4<f64>> {
    let (batch, in_c, h, wd) = dims4(x);
    let (out_c, w_in_c, kh, kw) = dims4(w);
    if w_in_c != in_c || kh != 3 || kw != 3 {
        return Err(MatError::shape(
            "conv forward",
            format!("weights ({out_c}, {in_c}, 3, 3)"),
            format!("({out_c}, {w_in_c}, {kh}, {kw})"),
        ));
    }
    let mut out = Array4::<f64>::zeros((batch, out_c, h, wd));
    for n in 0..batch {
        for o in 0..out_c {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[o];
                    for c in 0..in_c {
                        for ky in 0..3usize {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = xx as isize + kx as isize - 1;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[[o, c, ky, kx]] * x[[n, c, iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[n, o, y, xx]] = acc;
                }
            }
        }
    }
    Ok(out)
}

fn conv3x3_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    g: &Array4<f64>,
) -> (Array4<f64>, Array1<f64>, Array4<f64>) {
    let (batch, in_c, h, wd) = dims4(x);
    let out_c = w.shape()[0];
    let mut dw = Array4::<f64>::zeros(w.raw_dim());
    let mut db = Array1::<f64>::zeros(out_c);
    let mut dx = Array4::<f64>::zeros(x.raw_dim());
    for n in 0..batch {
        for o in 0..out_c {
            for y in 0..h {
                for xx in 0..wd {
                    let go = g[[n, o, y, xx]];
                    if go == 0.0 {
                        continue;
                    }
                    db[o] += go;
                    for c in 0..in_c {
                        for ky in 0..3usize {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = xx as isize + kx as isize - 1;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                dw[[o, c, ky, kx]] += go * x[[n, c, iy, ix]];
                                dx[[n, c, iy, ix]] += go * w[[o, c, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

fn maxpool2_forward(x: &Array4<f64>) -> Result<Array4<f64>> {
    let (batch, c, h, w) = dims4(x);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(MatError::Config(format!(
            "maxpool input {h}x{w} too small to pool"
        )));
    }
    let mut out = Array4::<f64>::zeros((batch, c, oh, ow));
    for n in 0..batch {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x[[n, ch, 2 * y + dy, 2 * xx + dx]];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[[n, ch, y, xx]] = best;
                }
            }
        }
    }
    Ok(out)
}

fn maxpool2_backward(x: &Array4<f64>, g: &Array4<f64>) -> Array4<f64> {
    let (batch, c, _, _) = dims4(x);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let mut dx = Array4::<f64>::zeros(x.raw_dim());
    for n in 0..batch {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    // Route to the first maximum in scan order.
                    let (mut by, mut bx, mut best) = (0usize, 0usize, f64::NEG_INFINITY);
                    for dy in 0..2 {
                        for dx2 in 0..2 {
                            let v = x[[n, ch, 2 * y + dy, 2 * xx + dx2]];
                            if v > best {
                                best = v;
                                by = dy;
                                bx = dx2;
                            }
                        }
                    }
                    dx[[n, ch, 2 * y + by, 2 * xx + bx]] += g[[n, ch, y, xx]];
                }
            }
        }
    }
    dx
}
