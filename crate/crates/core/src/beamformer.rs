//! Learnable time-frequency beamformer.
//!
//! Multi-channel spectrograms are carried as real tensors `[B, 2N, T, F]`
//! holding the real parts of all `N` channels followed by their imaginary
//! parts. The beamformer produces complex weights in the same layout and
//! sums the weighted channels into one complex spectrogram `[B, 2, T, F]`:
//!
//! ```text
//! Y[t,f] = Σ_n X[n,t,f] · w[n,t,f]
//! ```
//!
//! Three weight sources are supported: an adaptive CNN
//! (Conv2D-BatchNorm-ELU-Conv2D, 3×3 kernels) computing per-recording
//! weights, a learnable fixed weight per channel and bin, and a learnable
//! fixed weight per bin shared by all channels.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Layer, LayerSpec, Mode, Saved};
use crate::dsp::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::{Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamformerMode {
    Adaptive,
    FixedMulti,
    FixedSingle,
}

impl std::str::FromStr for BeamformerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "fixed_multi" => Ok(Self::FixedMulti),
            "fixed_single" => Ok(Self::FixedSingle),
            other => Err(Error::Config(format!(
                "unknown beamformer mode {other:?} (expected adaptive, fixed_multi or fixed_single)"
            ))),
        }
    }
}

impl std::fmt::Display for BeamformerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adaptive => "adaptive",
            Self::FixedMulti => "fixed_multi",
            Self::FixedSingle => "fixed_single",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamformerConfig {
    pub mode: BeamformerMode,
    pub n_channels: usize,
    /// Intermediate channels of the adaptive CNN.
    pub n_f: usize,
}

impl BeamformerConfig {
    pub fn new(mode: BeamformerMode, n_channels: usize) -> Self {
        BeamformerConfig {
            mode,
            n_channels,
            n_f: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::Config(
                "beamformer needs at least one channel".into(),
            ));
        }
        if self.n_f == 0 {
            return Err(Error::Config("beamformer n_f must be positive".into()));
        }
        Ok(())
    }
}

/// Complex weights `W = w_re + j·w_im`. Shapes: adaptive `[N, T, F]`,
/// fixed_multi `[N, F]`, fixed_single `[F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamformerWeights {
    pub mode: BeamformerMode,
    pub w_re: Tensor,
    pub w_im: Tensor,
}

impl BeamformerWeights {
    pub fn new(mode: BeamformerMode, w_re: Tensor, w_im: Tensor) -> Result<Self> {
        let rank = match mode {
            BeamformerMode::Adaptive => 3,
            BeamformerMode::FixedMulti => 2,
            BeamformerMode::FixedSingle => 1,
        };
        w_re.expect_rank("beamformer weights (real)", rank)?;
        if w_re.shape() != w_im.shape() {
            return Err(Error::shape(
                "beamformer weights",
                "imaginary shape",
                w_re.shape(),
                w_im.shape(),
            ));
        }
        if !w_re.all_finite() || !w_im.all_finite() {
            return Err(Error::NonFinite("beamformer weights".into()));
        }
        Ok(BeamformerWeights { mode, w_re, w_im })
    }

    pub fn n_bins(&self) -> usize {
        *self.w_re.shape().last().expect("rank >= 1")
    }

    /// Rows of the Gram matrix: channels, or 1 for shared weights.
    pub fn n_rows(&self) -> usize {
        match self.mode {
            BeamformerMode::FixedSingle => 1,
            _ => self.w_re.dim(0),
        }
    }

    /// Weight for channel `n` at `(t, f)`, broadcasting fixed weights.
    pub fn at(&self, n: usize, t: usize, f: usize) -> Complex64 {
        let idx = match self.mode {
            BeamformerMode::Adaptive => (n * self.w_re.dim(1) + t) * self.w_re.dim(2) + f,
            BeamformerMode::FixedMulti => n * self.w_re.dim(1) + f,
            BeamformerMode::FixedSingle => f,
        };
        Complex64::new(self.w_re.data()[idx], self.w_im.data()[idx])
    }
}

/// Weights for a batch, in the `[re.., im..]` channel layout.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchWeights {
    /// `[B, 2N, T, F]`
    PerItem(Tensor),
    /// `[2, R, F]` with `R = N` (fixed_multi) or `R = 1` (fixed_single,
    /// broadcast over channels).
    Shared(Tensor),
}

impl BatchWeights {
    pub fn tensor(&self) -> &Tensor {
        match self {
            BatchWeights::PerItem(t) | BatchWeights::Shared(t) => t,
        }
    }

    fn like_zeros(&self) -> BatchWeights {
        match self {
            BatchWeights::PerItem(t) => BatchWeights::PerItem(Tensor::zeros(t.shape())),
            BatchWeights::Shared(t) => BatchWeights::Shared(Tensor::zeros(t.shape())),
        }
    }
}

/// Packs `N` spectrograms into a `[1, 2N, T, F]` tensor.
pub fn stack_spectrograms(specs: &[ComplexSpectrogram]) -> Result<Tensor> {
    let first = specs
        .first()
        .ok_or_else(|| Error::Config("beamformer needs at least one spectrogram".into()))?;
    let (t_n, f_n) = (first.n_frames(), first.n_bins());
    let n = specs.len();
    let plane = t_n * f_n;
    let mut data = vec![0.0; 2 * n * plane];
    for (c, s) in specs.iter().enumerate() {
        if s.n_frames() != t_n || s.n_bins() != f_n {
            return Err(Error::shape(
                "beamformer input",
                format!("channel {c} T×F"),
                (t_n, f_n),
                (s.n_frames(), s.n_bins()),
            ));
        }
        for (i, z) in s.data().iter().enumerate() {
            data[c * plane + i] = z.re;
            data[(n + c) * plane + i] = z.im;
        }
    }
    Tensor::from_vec(&[1, 2 * n, t_n, f_n], data)
}

/// Weighted complex sum over channels for a batch.
pub fn beamform_batch(x: &Tensor, w: &BatchWeights) -> Result<Tensor> {
    let (b_n, n, plane, t_n, f_n) = batch_dims(x)?;
    check_weights(x, w)?;
    let mut y = Tensor::zeros(&[b_n, 2, t_n, f_n]);
    for b in 0..b_n {
        let xb = &x.data()[b * 2 * n * plane..(b + 1) * 2 * n * plane];
        let (y_re, y_im) = y.data_mut()[b * 2 * plane..(b + 1) * 2 * plane].split_at_mut(plane);
        for c in 0..n {
            let x_re = &xb[c * plane..(c + 1) * plane];
            let x_im = &xb[(n + c) * plane..(n + c + 1) * plane];
            match w {
                BatchWeights::PerItem(wt) => {
                    let wb = &wt.data()[b * 2 * n * plane..(b + 1) * 2 * n * plane];
                    let w_re = &wb[c * plane..(c + 1) * plane];
                    let w_im = &wb[(n + c) * plane..(n + c + 1) * plane];
                    for i in 0..plane {
                        y_re[i] += x_re[i] * w_re[i] - x_im[i] * w_im[i];
                        y_im[i] += x_re[i] * w_im[i] + x_im[i] * w_re[i];
                    }
                }
                BatchWeights::Shared(wt) => {
                    let (w_re, w_im) = shared_row(wt, c, f_n);
                    for t in 0..t_n {
                        for f in 0..f_n {
                            let i = t * f_n + f;
                            y_re[i] += x_re[i] * w_re[f] - x_im[i] * w_im[f];
                            y_im[i] += x_re[i] * w_im[f] + x_im[i] * w_re[f];
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`beamform_batch`] with respect to its input (optional)
/// and its weights.
pub fn beamform_batch_backward(
    x: &Tensor,
    w: &BatchWeights,
    dy: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, BatchWeights)> {
    let (b_n, n, plane, _, f_n) = batch_dims(x)?;
    check_weights(x, w)?;
    if dy.len() != b_n * 2 * plane {
        return Err(Error::shape(
            "beamform backward",
            "upstream size",
            b_n * 2 * plane,
            dy.len(),
        ));
    }
    let mut dw = w.like_zeros();
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    for b in 0..b_n {
        let xb = &x.data()[b * 2 * n * plane..(b + 1) * 2 * n * plane];
        let gb = &dy.data()[b * 2 * plane..(b + 1) * 2 * plane];
        let (g_re, g_im) = gb.split_at(plane);
        for c in 0..n {
            let x_re = &xb[c * plane..(c + 1) * plane];
            let x_im = &xb[(n + c) * plane..(n + c + 1) * plane];
            // per-element weights (broadcast for shared weights)
            let weight = |i: usize| -> (f64, f64) {
                match w {
                    BatchWeights::PerItem(wt) => {
                        let base = b * 2 * n * plane;
                        (
                            wt.data()[base + c * plane + i],
                            wt.data()[base + (n + c) * plane + i],
                        )
                    }
                    BatchWeights::Shared(wt) => {
                        let (r, m) = shared_row(wt, c, f_n);
                        (r[i % f_n], m[i % f_n])
                    }
                }
            };
            if let Some(dx) = dx.as_mut() {
                let base = b * 2 * n * plane;
                for i in 0..plane {
                    let (wr, wi) = weight(i);
                    dx.data_mut()[base + c * plane + i] = g_re[i] * wr + g_im[i] * wi;
                    dx.data_mut()[base + (n + c) * plane + i] = -g_re[i] * wi + g_im[i] * wr;
                }
            }
            match &mut dw {
                BatchWeights::PerItem(dt) => {
                    let base = b * 2 * n * plane;
                    let (lo, hi) =
                        dt.data_mut()[base..base + 2 * n * plane].split_at_mut(n * plane);
                    let d_re = &mut lo[c * plane..(c + 1) * plane];
                    let d_im = &mut hi[c * plane..(c + 1) * plane];
                    for i in 0..plane {
                        d_re[i] = g_re[i] * x_re[i] + g_im[i] * x_im[i];
                        d_im[i] = -g_re[i] * x_im[i] + g_im[i] * x_re[i];
                    }
                }
                BatchWeights::Shared(dt) => {
                    let rows = dt.dim(1);
                    let r = if rows == 1 { 0 } else { c };
                    let (lo, hi) = dt.data_mut().split_at_mut(rows * f_n);
                    let d_re = &mut lo[r * f_n..(r + 1) * f_n];
                    let d_im = &mut hi[r * f_n..(r + 1) * f_n];
                    for i in 0..plane {
                        let f = i % f_n;
                        d_re[f] += g_re[i] * x_re[i] + g_im[i] * x_im[i];
                        d_im[f] += -g_re[i] * x_im[i] + g_im[i] * x_re[i];
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

fn shared_row(wt: &Tensor, channel: usize, f_n: usize) -> (&[f64], &[f64]) {
    let rows = wt.dim(1);
    let r = if rows == 1 { 0 } else { channel };
    let (lo, hi) = wt.data().split_at(rows * f_n);
    (&lo[r * f_n..(r + 1) * f_n], &hi[r * f_n..(r + 1) * f_n])
}

fn batch_dims(x: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    x.expect_rank("beamformer input", 4)?;
    if !x.dim(1).is_multiple_of(2) || x.dim(1) == 0 {
        return Err(Error::shape(
            "beamformer input",
            "channel axis (2N)",
            "even, > 0",
            x.dim(1),
        ));
    }
    let (t_n, f_n) = (x.dim(2), x.dim(3));
    Ok((x.dim(0), x.dim(1) / 2, t_n * f_n, t_n, f_n))
}

fn check_weights(x: &Tensor, w: &BatchWeights) -> Result<()> {
    match w {
        BatchWeights::PerItem(t) if t.shape() != x.shape() => Err(Error::shape(
            "beamformer weights",
            "shape",
            x.shape(),
            t.shape(),
        )),
        BatchWeights::Shared(t) => {
            let n = x.dim(1) / 2;
            let ok = t.rank() == 3
                && t.dim(0) == 2
                && (t.dim(1) == n || t.dim(1) == 1)
                && t.dim(2) == x.dim(3);
            if ok {
                Ok(())
            } else {
                Err(Error::shape(
                    "beamformer weights",
                    "shape",
                    format!("[2, {n} or 1, {}]", x.dim(3)),
                    t.shape(),
                ))
            }
        }
        _ => Ok(()),
    }
}

/// `λ(‖G_re − I‖_F + ‖G_im − I‖_F) + γ(‖w_re‖₁ + ‖w_im‖₁)` for one
/// weight set viewed as `rows × cols` matrices, with its gradient.
pub fn ortho_sparsity(
    w_re: &[f64],
    w_im: &[f64],
    rows: usize,
    cols: usize,
    lambda: f64,
    gamma: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut loss = 0.0;
    let mut grads = [vec![0.0; rows * cols], vec![0.0; rows * cols]];
    for (w, g) in [w_re, w_im].into_iter().zip(grads.iter_mut()) {
        if lambda != 0.0 {
            let mut gram = vec![0.0; rows * rows];
            gemm(rows, cols, rows, 1.0, w, false, w, true, 0.0, &mut gram);
            for i in 0..rows {
                gram[i * rows + i] -= 1.0;
            }
            let norm = gram.iter().map(|v| v * v).sum::<f64>().sqrt();
            loss += lambda * norm;
            if norm > 0.0 {
                // d‖D‖/dW = 2 D W / ‖D‖ for symmetric D = W Wᵀ − I
                gemm(
                    rows,
                    rows,
                    cols,
                    2.0 * lambda / norm,
                    &gram,
                    false,
                    w,
                    false,
                    0.0,
                    g,
                );
            }
        }
        if gamma != 0.0 {
            loss += gamma * w.iter().map(|v| v.abs()).sum::<f64>();
            for (gi, wi) in g.iter_mut().zip(w) {
                if *wi > 0.0 {
                    *gi += gamma;
                } else if *wi < 0.0 {
                    *gi -= gamma;
                }
            }
        }
    }
    let [g_re, g_im] = grads;
    (loss, g_re, g_im)
}

fn check_reg_weights(lambda: f64, gamma: f64) -> Result<()> {
    if !(lambda >= 0.0) || !(gamma >= 0.0) {
        return Err(Error::Config(format!(
            "regularizer weights must be non-negative (lambda = {lambda}, gamma = {gamma})"
        )));
    }
    Ok(())
}

/// Regularizer of one weight set; adaptive weights are reshaped to
/// `N × (T·F)`, fixed_single weights form a single row.
pub fn regularizer(weights: &BeamformerWeights, lambda: f64, gamma: f64) -> Result<f64> {
    check_reg_weights(lambda, gamma)?;
    let rows = weights.n_rows();
    let cols = weights.w_re.len() / rows;
    Ok(ortho_sparsity(
        weights.w_re.data(),
        weights.w_im.data(),
        rows,
        cols,
        lambda,
        gamma,
    )
    .0)
}

/// Batch regularizer: averaged over items for per-item weights, applied
/// once for shared weights. Returns the loss and its gradient.
pub fn regularizer_batch(w: &BatchWeights, lambda: f64, gamma: f64) -> Result<(f64, BatchWeights)> {
    check_reg_weights(lambda, gamma)?;
    let mut grad = w.like_zeros();
    let mut total = 0.0;
    match (w, &mut grad) {
        (BatchWeights::PerItem(t), BatchWeights::PerItem(g)) => {
            let b_n = t.dim(0);
            let n = t.dim(1) / 2;
            let plane = t.dim(2) * t.dim(3);
            let item = 2 * n * plane;
            let scale = 1.0 / b_n as f64;
            for b in 0..b_n {
                let wb = &t.data()[b * item..(b + 1) * item];
                let (loss, g_re, g_im) =
                    ortho_sparsity(&wb[..n * plane], &wb[n * plane..], n, plane, lambda, gamma);
                total += loss * scale;
                let gb = &mut g.data_mut()[b * item..(b + 1) * item];
                for (d, v) in gb.iter_mut().zip(g_re.iter().chain(&g_im)) {
                    *d = v * scale;
                }
            }
        }
        (BatchWeights::Shared(t), BatchWeights::Shared(g)) => {
            let rows = t.dim(1);
            let f_n = t.dim(2);
            let (lo, hi) = t.data().split_at(rows * f_n);
            let (loss, g_re, g_im) = ortho_sparsity(lo, hi, rows, f_n, lambda, gamma);
            total = loss;
            for (d, v) in g.data_mut().iter_mut().zip(g_re.iter().chain(&g_im)) {
                *d = *v;
            }
        }
        _ => unreachable!("gradient mirrors the weight variant"),
    }
    Ok((total, grad))
}

/// Complex sum of `N` spectrograms weighted per channel.
pub fn beamform(
    specs: &[ComplexSpectrogram],
    weights: &BeamformerWeights,
) -> Result<ComplexSpectrogram> {
    let x = stack_spectrograms(specs)?;
    let (t_n, f_n) = (x.dim(2), x.dim(3));
    let n = specs.len();
    let batch_w = single_to_batch(weights, n, t_n, f_n)?;
    let y = beamform_batch(&x, &batch_w)?;
    let plane = t_n * f_n;
    let data = (0..plane)
        .map(|i| Complex64::new(y.data()[i], y.data()[plane + i]))
        .collect();
    ComplexSpectrogram::from_parts(specs[0].config().clone(), t_n, f_n, data)
}

fn single_to_batch(
    w: &BeamformerWeights,
    n: usize,
    t_n: usize,
    f_n: usize,
) -> Result<BatchWeights> {
    let expected: Vec<usize> = match w.mode {
        BeamformerMode::Adaptive => vec![n, t_n, f_n],
        BeamformerMode::FixedMulti => vec![n, f_n],
        BeamformerMode::FixedSingle => vec![f_n],
    };
    if w.w_re.shape() != expected.as_slice() {
        return Err(Error::shape(
            "beamformer weights",
            "shape",
            expected,
            w.w_re.shape(),
        ));
    }
    let data: Vec<f64> = w.w_re.data().iter().chain(w.w_im.data()).copied().collect();
    Ok(match w.mode {
        BeamformerMode::Adaptive => {
            BatchWeights::PerItem(Tensor::from_vec(&[1, 2 * n, t_n, f_n], data)?)
        }
        BeamformerMode::FixedMulti => BatchWeights::Shared(Tensor::from_vec(&[2, n, f_n], data)?),
        BeamformerMode::FixedSingle => BatchWeights::Shared(Tensor::from_vec(&[2, 1, f_n], data)?),
    })
}

#[derive(Clone, Debug)]
enum Net {
    Adaptive {
        conv1: Layer,
        bn: Layer,
        elu: Layer,
        conv2: Layer,
    },
    Fixed {
        weights: Param,
    },
}

/// Saved activations of a beamformer forward pass.
#[derive(Clone, Debug)]
pub struct BeamformerSaved {
    layers: Vec<Saved>,
}

/// Scale applied to the initial output-layer weights of the adaptive CNN.
pub const ADAPTIVE_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Beamformer {
    config: BeamformerConfig,
    n_bins: usize,
    net: Net,
}

impl Beamformer {
    /// `n_bins` fixes the frequency axis of the stored fixed weights.
    pub fn new<R: Rng + ?Sized>(
        config: BeamformerConfig,
        n_bins: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.n_channels;
        let net = match config.mode {
            BeamformerMode::Adaptive => {
                let mut conv2 = Layer::new(
                    LayerSpec::Conv2d {
                        in_channels: config.n_f,
                        out_channels: 2 * n,
                        kernel: [3, 3],
                    },
                    rng,
                )?;
                // Start near the channel average: small data-dependent
                // weights around a real bias of 1/N.
                conv2.params[0].value.scale(ADAPTIVE_INIT_SCALE);
                let bias = conv2.params[1].value.data_mut();
                bias[..n].fill(1.0 / n as f64);
                bias[n..].fill(0.0);
                Net::Adaptive {
                    conv1: Layer::new(
                        LayerSpec::Conv2d {
                            in_channels: 2 * n,
                            out_channels: config.n_f,
                            kernel: [3, 3],
                        },
                        rng,
                    )?,
                    bn: Layer::new(
                        LayerSpec::BatchNorm {
                            channels: config.n_f,
                        },
                        rng,
                    )?,
                    elu: Layer::new(LayerSpec::Elu, rng)?,
                    conv2,
                }
            }
            BeamformerMode::FixedMulti | BeamformerMode::FixedSingle => {
                let rows = if config.mode == BeamformerMode::FixedMulti {
                    n
                } else {
                    1
                };
                let mut w = Tensor::zeros(&[2, rows, n_bins]);
                w.data_mut()[..rows * n_bins].fill(1.0 / n as f64);
                Net::Fixed {
                    weights: Param::new(w),
                }
            }
        };
        Ok(Beamformer {
            config,
            n_bins,
            net,
        })
    }

    pub fn config(&self) -> &BeamformerConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        match &self.net {
            Net::Adaptive {
                conv1, bn, conv2, ..
            } => conv1.param_count() + bn.param_count() + conv2.param_count(),
            Net::Fixed { weights } => weights.len(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        x.expect_rank("beamformer input", 4)?;
        if x.dim(1) != 2 * self.config.n_channels {
            return Err(Error::shape(
                "beamformer input",
                "channel axis (2N)",
                2 * self.config.n_channels,
                x.dim(1),
            ));
        }
        if self.config.mode != BeamformerMode::Adaptive && x.dim(3) != self.n_bins {
            return Err(Error::shape(
                "beamformer input",
                "frequency bins",
                self.n_bins,
                x.dim(3),
            ));
        }
        Ok(())
    }

    /// Weights for a `[B, 2N, T, F]` batch.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(BatchWeights, BeamformerSaved)> {
        self.check_input(x)?;
        match &self.net {
            Net::Adaptive {
                conv1,
                bn,
                elu,
                conv2,
            } => {
                let (h1, s1) = conv1.forward(x, mode)?;
                let (h2, s2) = bn.forward(&h1, mode)?;
                drop(h1);
                let (h3, s3) = elu.forward(&h2, mode)?;
                drop(h2);
                let (w, s4) = conv2.forward(&h3, mode)?;
                Ok((
                    BatchWeights::PerItem(w),
                    BeamformerSaved {
                        layers: vec![s1, s2, s3, s4],
                    },
                ))
            }
            Net::Fixed { weights } => Ok((
                BatchWeights::Shared(weights.value.clone()),
                BeamformerSaved { layers: Vec::new() },
            )),
        }
    }

    /// Back-propagates a weight gradient into the parameter accumulators.
    pub fn backward(&mut self, saved: &BeamformerSaved, dw: &BatchWeights) -> Result<()> {
        match (&mut self.net, dw) {
            (
                Net::Adaptive {
                    conv1,
                    bn,
                    elu,
                    conv2,
                },
                BatchWeights::PerItem(g),
            ) => {
                let [s1, s2, s3, s4] = saved.layers.as_slice() else {
                    return Err(Error::MissingState("beamformer".into()));
                };
                let (d3, g4) = conv2.backward(Some(s4), g)?;
                conv2.accumulate(&g4);
                let (d2, _) = elu.backward(Some(s3), &d3)?;
                let (d1, g2) = bn.backward(Some(s2), &d2)?;
                bn.accumulate(&g2);
                let (_, g1) = conv1.backward_with(Some(s1), &d1, false)?;
                conv1.accumulate(&g1);
                Ok(())
            }
            (Net::Fixed { weights }, BatchWeights::Shared(g)) => {
                weights.grad.add_assign(g);
                Ok(())
            }
            _ => Err(Error::Config(
                "beamformer gradient does not match its mode".into(),
            )),
        }
    }

    /// Updates batch norm running statistics after a train-mode pass.
    pub fn commit(&mut self, saved: &BeamformerSaved) {
        if let (Net::Adaptive { bn, .. }, Some(s)) = (&mut self.net, saved.layers.get(1)) {
            bn.commit(s);
        }
    }

    /// Inference-mode weights for one recording.
    pub fn compute_weights(&self, specs: &[ComplexSpectrogram]) -> Result<BeamformerWeights> {
        if specs.len() != self.config.n_channels {
            return Err(Error::shape(
                "beamformer",
                "channel count",
                self.config.n_channels,
                specs.len(),
            ));
        }
        let x = stack_spectrograms(specs)?;
        let (t_n, f_n) = (x.dim(2), x.dim(3));
        let n = self.config.n_channels;
        let (w, _) = self.forward(&x, Mode::Eval)?;
        let plane = t_n * f_n;
        match (self.config.mode, w) {
            (BeamformerMode::Adaptive, BatchWeights::PerItem(t)) => {
                let (lo, hi) = t.data().split_at(n * plane);
                BeamformerWeights::new(
                    BeamformerMode::Adaptive,
                    Tensor::from_vec(&[n, t_n, f_n], lo.to_vec())?,
                    Tensor::from_vec(&[n, t_n, f_n], hi.to_vec())?,
                )
            }
            (mode, BatchWeights::Shared(t)) => {
                let rows = t.dim(1);
                let (lo, hi) = t.data().split_at(rows * f_n);
                let shape: Vec<usize> = if mode == BeamformerMode::FixedMulti {
                    vec![rows, f_n]
                } else {
                    vec![f_n]
                };
                BeamformerWeights::new(
                    mode,
                    Tensor::from_vec(&shape, lo.to_vec())?,
                    Tensor::from_vec(&shape, hi.to_vec())?,
                )
            }
            _ => unreachable!("weight variant follows the mode"),
        }
    }

    pub(crate) fn visit_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match &self.net {
            Net::Adaptive {
                conv1, bn, conv2, ..
            } => {
                push_layer(prefix, "conv1", conv1, out);
                push_layer(prefix, "bn", bn, out);
                push_layer(prefix, "conv2", conv2, out);
            }
            Net::Fixed { weights } => out.push((format!("{prefix}.weights"), &weights.value)),
        }
    }

    pub(crate) fn visit_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        match &mut self.net {
            Net::Adaptive {
                conv1, bn, conv2, ..
            } => {
                push_layer_mut(prefix, "conv1", conv1, out);
                push_layer_mut(prefix, "bn", bn, out);
                push_layer_mut(prefix, "conv2", conv2, out);
            }
            Net::Fixed { weights } => out.push((format!("{prefix}.weights"), &mut weights.value)),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.net {
            Net::Adaptive {
                conv1, bn, conv2, ..
            } => conv1
                .params
                .iter_mut()
                .chain(bn.params.iter_mut())
                .chain(conv2.params.iter_mut())
                .collect(),
            Net::Fixed { weights } => vec![weights],
        }
    }
}

pub(crate) fn push_layer<'a>(
    prefix: &str,
    name: &str,
    layer: &'a Layer,
    out: &mut Vec<(String, &'a Tensor)>,
) {
    for ((pname, _), p) in layer.spec().param_shapes().iter().zip(&layer.params) {
        out.push((format!("{prefix}.{name}.{pname}"), &p.value));
    }
    for ((bname, _), b) in layer.spec().buffer_shapes().iter().zip(&layer.buffers) {
        out.push((format!("{prefix}.{name}.{bname}"), b));
    }
}

pub(crate) fn push_layer_mut<'a>(
    prefix: &str,
    name: &str,
    layer: &'a mut Layer,
    out: &mut Vec<(String, &'a mut Tensor)>,
) {
    let spec = layer.spec().clone();
    for ((pname, _), p) in spec.param_shapes().iter().zip(layer.params.iter_mut()) {
        out.push((format!("{prefix}.{name}.{pname}"), &mut p.value));
    }
    for ((bname, _), b) in spec.buffer_shapes().iter().zip(layer.buffers.iter_mut()) {
        out.push((format!("{prefix}.{name}.{bname}"), b));
    }
}
