//! Parameterized layers composed from tensor ops: 3-D convolution, linear
//! maps, batch normalization, the two-layer MLP block used throughout the
//! model, sinusoidal positional encodings, and the training losses.

use std::rc::Rc;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor, Var};
use crate::Rng;

/// Whether a forward pass uses batch statistics (and updates running ones) or
/// frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weight initialization: uniform in ±sqrt(1/fan_in), biases zero.
pub fn uniform_init(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init values are finite")
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer; weight stored out×in.
pub struct LinearLayer {
    pub weight: Rc<Param>,
    pub bias: Rc<Param>,
}

impl LinearLayer {
    pub fn new(rng: &mut Rng, name: &str, out_dim: usize, in_dim: usize) -> Self {
        LinearLayer {
            weight: Param::new(
                format!("{name}.weight"),
                uniform_init(rng, &[out_dim, in_dim], in_dim),
                true,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true),
        }
    }

    /// x: R×in → R×out
    pub fn forward(&self, x: &Var) -> Result<Var> {
        x.matmul_nt(&Var::param(&self.weight))?
            .add_row(&Var::param(&self.bias))
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        out.push(Rc::clone(&self.weight));
        out.push(Rc::clone(&self.bias));
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over the channel axis.
///
/// For 2-D inputs (R×C) the population for each feature is the R rows; for
/// 5-D inputs (N×C×T×H×W) it is every (N, T, H, W) position of the channel.
/// Running statistics store the biased population moments so that converged
/// running stats reproduce the train-time normalization exactly.
pub struct BatchNormLayer {
    pub gamma: Rc<Param>,
    pub beta: Rc<Param>,
    pub running_mean: Rc<Param>,
    pub running_var: Rc<Param>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormLayer {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNormLayer {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: Param::new(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            running_var: Param::new(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                false,
            ),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Normalizes x over its channel axis. 2-D inputs are R×C; 5-D inputs are
    /// N×C×T×H×W. In train mode the batch dimension (R or N) must be ≥ 2.
    pub fn forward(&self, x: &Var, mode: Mode) -> Result<Var> {
        let c = self.channels();
        let (batch, post) = match *x.shape() {
            [r, cc] if cc == c => (r, 1usize),
            [n, cc, t, h, w] if cc == c => (n, t * h * w),
            ref s => {
                return Err(Error::shape(format!(
                    "batchnorm({c} channels): unsupported input shape {s:?}"
                )))
            }
        };
        if mode == Mode::Train && batch < 2 {
            return Err(Error::contract(
                "batchnorm in train mode requires a batch of at least 2",
            ));
        }
        let m = (batch * post) as f64;
        let xs = x.value().data();
        let idx = |b: usize, ch: usize, p: usize| (b * c + ch) * post + p;

        // Statistics used for this forward pass.
        let (mean, std): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..batch {
                        for p in 0..post {
                            acc += xs[idx(b, ch, p)];
                        }
                    }
                    mean[ch] = acc / m;
                    let mut vacc = 0.0;
                    for b in 0..batch {
                        for p in 0..post {
                            let d = xs[idx(b, ch, p)] - mean[ch];
                            vacc += d * d;
                        }
                    }
                    var[ch] = vacc / m;
                }
                self.running_mean.update_value(|t| {
                    let v = t.data_mut();
                    for ch in 0..c {
                        v[ch] = (1.0 - self.momentum) * v[ch] + self.momentum * mean[ch];
                    }
                });
                self.running_var.update_value(|t| {
                    let v = t.data_mut();
                    for ch in 0..c {
                        v[ch] = (1.0 - self.momentum) * v[ch] + self.momentum * var[ch];
                    }
                });
                let std = var.iter().map(|&v| (v + self.epsilon).sqrt()).collect();
                (mean, std)
            }
            Mode::Eval => {
                let mean = self.running_mean.value().data().to_vec();
                let std = self
                    .running_var
                    .value()
                    .data()
                    .iter()
                    .map(|&v| (v + self.epsilon).sqrt())
                    .collect();
                (mean, std)
            }
        };

        let gamma = Var::param(&self.gamma);
        let beta = Var::param(&self.beta);
        let gs = gamma.value().data().to_vec();
        let bs = beta.value().data().to_vec();
        let mut out = vec![0.0; xs.len()];
        for b in 0..batch {
            for ch in 0..c {
                let scale = gs[ch] / std[ch];
                let shift = bs[ch] - mean[ch] * scale;
                for p in 0..post {
                    let i = idx(b, ch, p);
                    out[i] = xs[i] * scale + shift;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)
            .map_err(|e| Error::numeric(format!("batchnorm: {e}")))?;

        let train = mode == Mode::Train;
        Ok(Var::from_parts(
            "batchnorm",
            value,
            vec![x.clone(), gamma, beta],
            Box::new(move |g, ctx| {
                let xs = ctx.input_value(0).data();
                let gs = ctx.input_value(1).data();
                let gd = g.data();
                let idx = |b: usize, ch: usize, p: usize| (b * c + ch) * post + p;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = ctx.need[0].then(|| vec![0.0; xs.len()]);
                for ch in 0..c {
                    let mu = mean[ch];
                    let s = std[ch];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for b in 0..batch {
                        for p in 0..post {
                            let i = idx(b, ch, p);
                            let xhat = (xs[i] - mu) / s;
                            sum_g += gd[i];
                            sum_gx += gd[i] * xhat;
                        }
                    }
                    dbeta[ch] = sum_g;
                    dgamma[ch] = sum_gx;
                    if let Some(dx) = dx.as_mut() {
                        let coef = gs[ch] / s;
                        for b in 0..batch {
                            for p in 0..post {
                                let i = idx(b, ch, p);
                                if train {
                                    let xhat = (xs[i] - mu) / s;
                                    dx[i] = coef * (gd[i] - sum_g / m - xhat * (sum_gx / m));
                                } else {
                                    dx[i] = coef * gd[i];
                                }
                            }
                        }
                    }
                }
                let shape = ctx.input_value(0).shape().to_vec();
                Ok(vec![
                    dx.map(|d| Tensor::from_raw(shape, d)),
                    ctx.need[1].then(|| Tensor::from_raw(vec![c], dgamma)),
                    ctx.need[2].then(|| Tensor::from_raw(vec![c], dbeta)),
                ])
            }),
        ))
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        out.push(Rc::clone(&self.gamma));
        out.push(Rc::clone(&self.beta));
        out.push(Rc::clone(&self.running_mean));
        out.push(Rc::clone(&self.running_var));
    }
}

// ---------------------------------------------------------------------------
// 3-D convolution
// ---------------------------------------------------------------------------

/// Cross-correlation over (T, H, W) volumes.
pub struct Conv3dLayer {
    pub weight: Rc<Param>,
    pub bias: Rc<Param>,
    pub strides: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl Conv3dLayer {
    pub fn new(
        rng: &mut Rng,
        name: &str,
        c_out: usize,
        c_in: usize,
        kernel: (usize, usize, usize),
        strides: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Self {
        let (kt, kh, kw) = kernel;
        let fan_in = c_in * kt * kh * kw;
        Conv3dLayer {
            weight: Param::new(
                format!("{name}.weight"),
                uniform_init(rng, &[c_out, c_in, kt, kh, kw], fan_in),
                true,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out]), true),
            strides,
            padding,
        }
    }

    /// x: N×C_in×T×H×W → N×C_out×T'×H'×W'. Output extents follow the usual
    /// floor rule `(in + 2·pad − k)/stride + 1`; with stride 1 and pad
    /// (k−1)/2 the temporal extent is preserved.
    pub fn forward(&self, x: &Var) -> Result<Var> {
        conv3d(
            x,
            &Var::param(&self.weight),
            &Var::param(&self.bias),
            self.strides,
            self.padding,
        )
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        out.push(Rc::clone(&self.weight));
        out.push(Rc::clone(&self.bias));
    }
}

#[derive(Clone)]
struct ConvDims {
    n: usize,
    c_in: usize,
    c_out: usize,
    in_d: [usize; 3],
    out_d: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

/// Functional 3-D convolution over `Var`s.
pub fn conv3d(
    x: &Var,
    weight: &Var,
    bias: &Var,
    strides: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Var> {
    let (n, c_in, t, h, w) = match *x.shape() {
        [n, c, t, h, w] => (n, c, t, h, w),
        ref s => return Err(Error::shape(format!("conv3d: input shape {s:?}"))),
    };
    let (c_out, wc_in, kt, kh, kw) = match *weight.shape() {
        [co, ci, kt, kh, kw] => (co, ci, kt, kh, kw),
        ref s => return Err(Error::shape(format!("conv3d: weight shape {s:?}"))),
    };
    if wc_in != c_in || bias.value().numel() != c_out {
        return Err(Error::shape(format!(
            "conv3d: weight expects {wc_in} input channels, input has {c_in}"
        )));
    }
    let mut dims = ConvDims {
        n,
        c_in,
        c_out,
        in_d: [t, h, w],
        out_d: [0; 3],
        k: [kt, kh, kw],
        stride: [strides.0, strides.1, strides.2],
        pad: [padding.0, padding.1, padding.2],
    };
    for a in 0..3 {
        let padded = dims.in_d[a] + 2 * dims.pad[a];
        if padded < dims.k[a] {
            return Err(Error::shape(format!(
                "conv3d: kernel {} exceeds padded extent {} on axis {}",
                dims.k[a], padded, a
            )));
        }
        dims.out_d[a] = (padded - dims.k[a]) / dims.stride[a] + 1;
    }

    let out = conv3d_forward(x.value(), weight.value(), bias.value(), &dims);
    let value = Tensor::new(
        vec![n, c_out, dims.out_d[0], dims.out_d[1], dims.out_d[2]],
        out,
    )
    .map_err(|e| Error::numeric(format!("conv3d: {e}")))?;

    Ok(Var::from_parts(
        "conv3d",
        value,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, ctx| {
            let (dx, dw, db) = conv3d_backward(
                g,
                ctx.input_value(0),
                ctx.input_value(1),
                &dims,
                ctx.need[0],
            );
            Ok(vec![
                dx.map(|d| Tensor::from_raw(ctx.input_value(0).shape().to_vec(), d)),
                ctx.need[1]
                    .then(|| Tensor::from_raw(ctx.input_value(1).shape().to_vec(), dw)),
                ctx.need[2].then(|| Tensor::from_raw(vec![dims.c_out], db)),
            ])
        }),
    ))
}

/// Valid output range on one axis for a given kernel offset: all `o` with
/// `0 <= o*stride + k_off - pad < extent`.
fn axis_range(
    out_d: usize,
    stride: usize,
    k_off: usize,
    pad: usize,
    extent: usize,
) -> (usize, usize, isize) {
    let shift = k_off as isize - pad as isize;
    let start = if shift < 0 {
        ((-shift) as usize).div_ceil(stride)
    } else {
        0
    };
    let max_in = extent as isize - 1 - shift;
    let end = if max_in < 0 {
        0
    } else {
        out_d.min(max_in as usize / stride + 1)
    };
    (start, end.max(start), shift)
}

fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, d: &ConvDims) -> Vec<f64> {
    let [ot_d, oh_d, ow_d] = d.out_d;
    let [it_d, ih_d, iw_d] = d.in_d;
    let [kt, kh, kw] = d.k;
    let xs = x.data();
    let ws = w.data();
    let kvol = kt * kh * kw;
    let mut out = vec![0.0; d.n * d.c_out * ot_d * oh_d * ow_d];
    // strided input rows are gathered once per (row, kernel offset) and the
    // contiguous buffer reused across all output channels
    let mut xbuf = vec![0.0; ow_d];
    for nn in 0..d.n {
        for co in 0..d.c_out {
            let ob = (nn * d.c_out + co) * ot_d * oh_d * ow_d;
            out[ob..ob + ot_d * oh_d * ow_d].fill(b.data()[co]);
        }
        let nb = nn * d.c_out * ot_d * oh_d * ow_d;
        for ci in 0..d.c_in {
            let ib = (nn * d.c_in + ci) * it_d * ih_d * iw_d;
            for kti in 0..kt {
                let (t0, t1, tsh) = axis_range(ot_d, d.stride[0], kti, d.pad[0], it_d);
                for khi in 0..kh {
                    let (h0, h1, hsh) = axis_range(oh_d, d.stride[1], khi, d.pad[1], ih_d);
                    for kwi in 0..kw {
                        let (w0, w1, wsh) = axis_range(ow_d, d.stride[2], kwi, d.pad[2], iw_d);
                        if w1 <= w0 {
                            continue;
                        }
                        let koff = (kti * kh + khi) * kw + kwi;
                        for ot in t0..t1 {
                            let it = (ot * d.stride[0]) as isize + tsh;
                            let xrow_t = ib + it as usize * ih_d * iw_d;
                            let orow_t = ot * oh_d * ow_d;
                            for oh in h0..h1 {
                                let ih = (oh * d.stride[1]) as isize + hsh;
                                let xrow = xrow_t + ih as usize * iw_d;
                                let orow = orow_t + oh * ow_d;
                                // first input index touched; ≥ 0 by the range construction
                                let base = (xrow as isize
                                    + (w0 * d.stride[2]) as isize
                                    + wsh) as usize;
                                let span = w1 - w0;
                                let xs_r: &[f64] = if d.stride[2] == 1 {
                                    &xs[base..base + span]
                                } else {
                                    for (k, ow) in (w0..w1).enumerate() {
                                        let iw = (ow * d.stride[2]) as isize + wsh;
                                        xbuf[k] = xs[xrow + iw as usize];
                                    }
                                    &xbuf[..span]
                                };
                                for co in 0..d.c_out {
                                    let wv = ws[(co * d.c_in + ci) * kvol + koff];
                                    let obase = nb + co * ot_d * oh_d * ow_d + orow;
                                    let os_r = &mut out[obase + w0..obase + w1];
                                    for (o, xv) in os_r.iter_mut().zip(xs_r.iter()) {
                                        *o += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d_backward(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
    d: &ConvDims,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let [ot_d, oh_d, ow_d] = d.out_d;
    let [it_d, ih_d, iw_d] = d.in_d;
    let [kt, kh, kw] = d.k;
    let gs = g.data();
    let xs = x.data();
    let ws = w.data();
    let kvol = kt * kh * kw;
    let mut dw = vec![0.0; ws.len()];
    let mut db = vec![0.0; d.c_out];
    let mut dx = need_dx.then(|| vec![0.0; xs.len()]);
    let mut xbuf = vec![0.0; ow_d];
    let mut dxbuf = vec![0.0; ow_d];
    for nn in 0..d.n {
        for co in 0..d.c_out {
            let ob = (nn * d.c_out + co) * ot_d * oh_d * ow_d;
            let mut bacc = 0.0;
            for v in &gs[ob..ob + ot_d * oh_d * ow_d] {
                bacc += v;
            }
            db[co] += bacc;
        }
        let nb = nn * d.c_out * ot_d * oh_d * ow_d;
        for ci in 0..d.c_in {
            let ib = (nn * d.c_in + ci) * it_d * ih_d * iw_d;
            for kti in 0..kt {
                let (t0, t1, tsh) = axis_range(ot_d, d.stride[0], kti, d.pad[0], it_d);
                for khi in 0..kh {
                    let (h0, h1, hsh) = axis_range(oh_d, d.stride[1], khi, d.pad[1], ih_d);
                    for kwi in 0..kw {
                        let (w0, w1, wsh) = axis_range(ow_d, d.stride[2], kwi, d.pad[2], iw_d);
                        if w1 <= w0 {
                            continue;
                        }
                        let koff = (kti * kh + khi) * kw + kwi;
                        let span = w1 - w0;
                        for ot in t0..t1 {
                            let it = (ot * d.stride[0]) as isize + tsh;
                            let xrow_t = ib + it as usize * ih_d * iw_d;
                            let orow_t = ot * oh_d * ow_d;
                            for oh in h0..h1 {
                                let ih = (oh * d.stride[1]) as isize + hsh;
                                let xrow = xrow_t + ih as usize * iw_d;
                                let orow = orow_t + oh * ow_d;
                                let base = (xrow as isize
                                    + (w0 * d.stride[2]) as isize
                                    + wsh) as usize;
                                let contiguous = d.stride[2] == 1;
                                let xs_r: &[f64] = if contiguous {
                                    &xs[base..base + span]
                                } else {
                                    for (k, ow) in (w0..w1).enumerate() {
                                        let iw = (ow * d.stride[2]) as isize + wsh;
                                        xbuf[k] = xs[xrow + iw as usize];
                                    }
                                    &xbuf[..span]
                                };
                                if dx.is_some() {
                                    dxbuf[..span].fill(0.0);
                                }
                                for co in 0..d.c_out {
                                    let widx = (co * d.c_in + ci) * kvol + koff;
                                    let wv = ws[widx];
                                    let gbase = nb + co * ot_d * oh_d * ow_d + orow;
                                    let g_r = &gs[gbase + w0..gbase + w1];
                                    let mut wacc = 0.0;
                                    if dx.is_some() {
                                        for ((gv, xv), dxv) in
                                            g_r.iter().zip(xs_r.iter()).zip(dxbuf[..span].iter_mut())
                                        {
                                            wacc += gv * xv;
                                            *dxv += wv * gv;
                                        }
                                    } else {
                                        for (gv, xv) in g_r.iter().zip(xs_r.iter()) {
                                            wacc += gv * xv;
                                        }
                                    }
                                    dw[widx] += wacc;
                                }
                                if let Some(dx) = dx.as_mut() {
                                    if contiguous {
                                        let dst = &mut dx[base..base + span];
                                        for (d_out, d_in) in dst.iter_mut().zip(dxbuf[..span].iter())
                                        {
                                            *d_out += d_in;
                                        }
                                    } else {
                                        for (k, ow) in (w0..w1).enumerate() {
                                            let iw = (ow * d.stride[2]) as isize + wsh;
                                            dx[xrow + iw as usize] += dxbuf[k];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// MLP block
// ---------------------------------------------------------------------------

/// Two fully connected layers with batch normalization and ELU on the hidden
/// activation: `lin2(elu(bn(lin1(x))))`. The output layer is left bare so
/// downstream sigmoids and regression heads see unbounded values.
pub struct MlpBlock {
    pub lin1: LinearLayer,
    pub bn: BatchNormLayer,
    pub lin2: LinearLayer,
}

impl MlpBlock {
    pub fn new(rng: &mut Rng, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        MlpBlock {
            lin1: LinearLayer::new(rng, &format!("{name}.lin1"), hidden, in_dim),
            bn: BatchNormLayer::new(&format!("{name}.bn"), hidden),
            lin2: LinearLayer::new(rng, &format!("{name}.lin2"), out_dim, hidden),
        }
    }

    pub fn forward(&self, x: &Var, mode: Mode) -> Result<Var> {
        let h = self.lin1.forward(x)?;
        let h = self.bn.forward(&h, mode)?;
        let h = h.elu(1.0)?;
        self.lin2.forward(&h)
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        self.lin1.collect_params(out);
        self.bn.collect_params(out);
        self.lin2.collect_params(out);
    }
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

/// Sinusoidal positional encodings: `PE[j,2i] = sin(j/10000^{2i/d})`,
/// `PE[j,2i+1] = cos(j/10000^{2i/d})`. Requires an even dimension.
pub fn positional_encoding(t: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::config(format!(
            "positional encoding needs an even dimension, got {d}"
        )));
    }
    let mut data = vec![0.0; t * d];
    for j in 0..t {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = j as f64 * freq;
            data[j * d + 2 * i] = angle.sin();
            data[j * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![t, d], data)
}

// ---------------------------------------------------------------------------
// Losses and class binning
// ---------------------------------------------------------------------------

/// Mean absolute error between a prediction tensor and a constant target of
/// the same shape. The subgradient at exact ties is 0.
pub fn mae_loss(pred: &Var, target: &Tensor) -> Result<Var> {
    if pred.value().numel() == 0 {
        return Err(Error::contract("mae_loss on an empty batch"));
    }
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mae_loss: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let neg_target = Tensor::from_raw(
        target.shape().to_vec(),
        target.data().iter().map(|v| -v).collect(),
    );
    pred.add_const(&neg_target)?.abs()?.mean_all()
}

/// Mean negative log-softmax of the true class. `logits` is N×K with labels
/// in `0..K`.
pub fn cross_entropy_loss(logits: &Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        ref s => return Err(Error::shape(format!("cross_entropy: logits shape {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::contract(format!(
            "cross_entropy: {} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::contract("cross_entropy on an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!(
            "cross_entropy: label {bad} out of range 0..{k}"
        )));
    }
    let ls = logits.value().data();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &ls[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    let value = Tensor::new(vec![], vec![total / n as f64])
        .map_err(|e| Error::numeric(format!("cross_entropy: {e}")))?;
    let labels = labels.to_vec();
    Ok(Var::from_parts(
        "cross_entropy",
        value,
        vec![logits.clone()],
        Box::new(move |g, ctx| {
            let ls = ctx.input_value(0).data();
            let gv = g.data()[0] / n as f64;
            let mut dl = vec![0.0; n * k];
            for (r, &y) in labels.iter().enumerate() {
                let row = &ls[r * k..(r + 1) * k];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    dl[r * k + j] = e;
                    sum += e;
                }
                for j in 0..k {
                    dl[r * k + j] =
                        gv * (dl[r * k + j] / sum - if j == y { 1.0 } else { 0.0 });
                }
            }
            Ok(vec![Some(Tensor::from_raw(vec![n, k], dl))])
        }),
    ))
}

/// Bins an EF percentage into the four clinical ranges
/// [0−30], (30,40], (40,55], (55,100].
pub fn ef_to_class(ef: f64) -> Result<usize> {
    if !(0.0..=100.0).contains(&ef) {
        return Err(Error::contract(format!("EF {ef} outside [0, 100]")));
    }
    Ok(if ef <= 30.0 {
        0
    } else if ef <= 40.0 {
        1
    } else if ef <= 55.0 {
        2
    } else {
        3
    })
}
