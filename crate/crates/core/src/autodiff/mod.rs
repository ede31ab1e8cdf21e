//! Reverse-mode differentiation for the fixed layer set used by the
//! beamformer and the classifier.
//!
//! Each [`Layer`] exposes a forward pass that returns its output together
//! with the state the backward pass needs, and a backward pass that maps an
//! upstream gradient to the input gradient and one gradient per parameter.
//! Networks are composed by chaining forward calls and replaying the saved
//! states in reverse order.

mod conv;
pub mod gradcheck;
mod gru;
mod linear;
mod norm;
mod pool;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

pub use gradcheck::{grad_check, grad_check_with_shape, GradCheckReport};
pub use gru::DirectionTrace;
pub use norm::{EPSILON as BN_EPSILON, MOMENTUM as BN_MOMENTUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride 1, "same" zero padding. Input `[B, C_in, H, W]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
    },
    /// Input `[B, C, ...]`; statistics over every axis but 1.
    BatchNorm {
        channels: usize,
    },
    Elu,
    /// Max-pool plus average-pool along the last axis.
    PoolMaxAvgSum {
        rate: usize,
    },
    /// Input `[B, T, D]`, output `[B, T, 2H]` (forward then backward).
    BiGru {
        input_size: usize,
        hidden_size: usize,
    },
    /// Input `[rows, in]`.
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Elu => "elu",
            LayerSpec::PoolMaxAvgSum { .. } => "pool_max_avg_sum",
            LayerSpec::BiGru { .. } => "bigru",
            LayerSpec::Linear { .. } => "linear",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{}: {what}", self.name())));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel[0] == 0 || kernel[1] == 0 {
                    return bad("channel counts and kernel sizes must be positive");
                }
                if kernel[0] % 2 == 0 || kernel[1] % 2 == 0 {
                    return bad("same padding needs odd kernel sizes");
                }
            }
            LayerSpec::BatchNorm { channels: 0 } => return bad("zero channels"),
            LayerSpec::PoolMaxAvgSum { rate: 0 } => return bad("zero pooling rate"),
            LayerSpec::BiGru {
                input_size,
                hidden_size,
            } if input_size == 0 || hidden_size == 0 => return bad("zero size"),
            LayerSpec::Linear {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => return bad("zero size"),
            _ => {}
        }
        Ok(())
    }

    /// Parameter names and shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => vec![
                (
                    "weight",
                    vec![out_channels, in_channels, kernel[0], kernel[1]],
                ),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::BatchNorm { channels } => {
                vec![("weight", vec![channels]), ("bias", vec![channels])]
            }
            LayerSpec::Elu | LayerSpec::PoolMaxAvgSum { .. } => Vec::new(),
            LayerSpec::BiGru {
                input_size,
                hidden_size,
            } => {
                let h3 = 3 * hidden_size;
                vec![
                    ("fwd.w_ih", vec![h3, input_size]),
                    ("fwd.w_hh", vec![h3, hidden_size]),
                    ("fwd.b_ih", vec![h3]),
                    ("fwd.b_hh", vec![h3]),
                    ("bwd.w_ih", vec![h3, input_size]),
                    ("bwd.w_hh", vec![h3, hidden_size]),
                    ("bwd.b_ih", vec![h3]),
                    ("bwd.b_hh", vec![h3]),
                ]
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
        }
    }

    /// Non-learnable state (batch norm running statistics).
    pub fn buffer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::BatchNorm { channels } => vec![
                ("running_mean", vec![channels]),
                ("running_var", vec![channels]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// State saved by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub enum Saved {
    Conv2d {
        input: Tensor,
    },
    BatchNorm {
        x_hat: Tensor,
        inv_std: Vec<f64>,
        mode: Mode,
        /// Batch mean and unbiased variance, present in train mode.
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    },
    Elu {
        output: Tensor,
    },
    Pool {
        input_shape: Vec<usize>,
        argmax: Vec<u32>,
    },
    BiGru {
        input: Tensor,
        forward: DirectionTrace,
        backward: DirectionTrace,
    },
    Linear {
        input: Tensor,
    },
}

#[derive(Clone, Debug)]
pub struct Layer {
    spec: LayerSpec,
    pub params: Vec<Param>,
    pub buffers: Vec<Tensor>,
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

impl Layer {
    /// Builds a layer with fan-in scaled uniform weights and zero-mean
    /// identity batch norm.
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let fan_in = match spec {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel[0] * kernel[1],
            LayerSpec::BiGru { hidden_size, .. } => hidden_size,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => 1,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let value = match spec {
                    LayerSpec::BatchNorm { .. } if name == "weight" => Tensor::full(&shape, 1.0),
                    LayerSpec::BatchNorm { .. } => Tensor::zeros(&shape),
                    _ => Tensor::uniform(&shape, bound, rng),
                };
                Param::new(value)
            })
            .collect();
        let buffers = spec
            .buffer_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name == "running_var" {
                    Tensor::full(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Ok(Layer {
            spec,
            params,
            buffers,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let ctx = self.spec.name();
        if !input.all_finite() {
            return Err(Error::NonFinite(format!("{ctx} input")));
        }
        match self.spec {
            LayerSpec::Conv2d { in_channels, .. } => {
                input.expect_rank(ctx, 4)?;
                if input.dim(1) != in_channels {
                    return Err(Error::shape(
                        ctx,
                        "input channels (axis 1)",
                        in_channels,
                        input.dim(1),
                    ));
                }
            }
            LayerSpec::BatchNorm { channels } => {
                if input.rank() < 2 {
                    return Err(Error::shape(ctx, "rank", ">= 2", input.rank()));
                }
                if input.dim(1) != channels {
                    return Err(Error::shape(
                        ctx,
                        "channels (axis 1)",
                        channels,
                        input.dim(1),
                    ));
                }
            }
            LayerSpec::Elu => {}
            LayerSpec::PoolMaxAvgSum { rate } => {
                let last = input.shape().last().copied().unwrap_or(0);
                if last < rate {
                    return Err(Error::shape(
                        ctx,
                        "pooled axis (last)",
                        format!(">= {rate}"),
                        last,
                    ));
                }
            }
            LayerSpec::BiGru { input_size, .. } => {
                input.expect_rank(ctx, 3)?;
                if input.dim(2) != input_size {
                    return Err(Error::shape(
                        ctx,
                        "feature width (axis 2)",
                        input_size,
                        input.dim(2),
                    ));
                }
            }
            LayerSpec::Linear { in_features, .. } => {
                input.expect_rank(ctx, 2)?;
                if input.dim(1) != in_features {
                    return Err(Error::shape(
                        ctx,
                        "input features (axis 1)",
                        in_features,
                        input.dim(1),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Saved)> {
        self.check_input(input)?;
        let p = &self.params;
        let out = match self.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let geom = conv::ConvGeom {
                    in_ch: in_channels,
                    out_ch: out_channels,
                    kh: kernel[0],
                    kw: kernel[1],
                    h: input.dim(2),
                    w: input.dim(3),
                };
                let y = conv::forward(&geom, &p[0].value, &p[1].value, input)?;
                (
                    y,
                    Saved::Conv2d {
                        input: input.clone(),
                    },
                )
            }
            LayerSpec::BatchNorm { .. } => {
                let (mean, var, batch_stats) = match mode {
                    Mode::Train => {
                        let stats = norm::batch_stats(input);
                        let n = stats.count as f64;
                        let unbiased = stats
                            .var
                            .iter()
                            .map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v })
                            .collect::<Vec<_>>();
                        (stats.mean.clone(), stats.var, Some((stats.mean, unbiased)))
                    }
                    Mode::Eval => (
                        self.buffers[0].data().to_vec(),
                        self.buffers[1].data().to_vec(),
                        None,
                    ),
                };
                let inv_std: Vec<f64> = var
                    .iter()
                    .map(|v| 1.0 / (v + norm::EPSILON).sqrt())
                    .collect();
                let (y, x_hat) =
                    norm::normalize(input, &mean, &inv_std, p[0].value.data(), p[1].value.data());
                (
                    y,
                    Saved::BatchNorm {
                        x_hat,
                        inv_std,
                        mode,
                        batch_stats,
                    },
                )
            }
            LayerSpec::Elu => {
                let mut y = input.clone();
                y.data_mut().iter_mut().for_each(|v| *v = elu(*v));
                (y.clone(), Saved::Elu { output: y })
            }
            LayerSpec::PoolMaxAvgSum { rate } => {
                let (y, argmax) = pool::forward(input, rate);
                (
                    y,
                    Saved::Pool {
                        input_shape: input.shape().to_vec(),
                        argmax,
                    },
                )
            }
            LayerSpec::BiGru {
                input_size,
                hidden_size,
            } => {
                let geom = gru::GruGeom {
                    batch: input.dim(0),
                    steps: input.dim(1),
                    input: input_size,
                    hidden: hidden_size,
                };
                let mut y = Tensor::zeros(&[geom.batch, geom.steps, 2 * hidden_size]);
                let fwd = gru::forward_direction(
                    &geom,
                    &self.direction(0),
                    input.data(),
                    false,
                    y.data_mut(),
                );
                let bwd = gru::forward_direction(
                    &geom,
                    &self.direction(1),
                    input.data(),
                    true,
                    y.data_mut(),
                );
                (
                    y,
                    Saved::BiGru {
                        input: input.clone(),
                        forward: fwd,
                        backward: bwd,
                    },
                )
            }
            LayerSpec::Linear { .. } => {
                let y = linear::forward(&p[0].value, &p[1].value, input);
                (
                    y,
                    Saved::Linear {
                        input: input.clone(),
                    },
                )
            }
        };
        if !out.0.all_finite() {
            return Err(Error::NonFinite(format!("{} output", self.spec.name())));
        }
        Ok(out)
    }

    fn direction(&self, dir: usize) -> gru::DirectionParams<'_> {
        let p = &self.params[dir * 4..dir * 4 + 4];
        gru::DirectionParams {
            w_ih: &p[0].value,
            w_hh: &p[1].value,
            b_ih: &p[2].value,
            b_hh: &p[3].value,
        }
    }

    /// Input gradient and one gradient per parameter, in parameter order.
    pub fn backward(
        &self,
        saved: Option<&Saved>,
        upstream: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let (dx, grads) = self.backward_with(saved, upstream, true)?;
        Ok((dx.expect("input gradient requested"), grads))
    }

    /// As [`Layer::backward`], optionally skipping the input gradient (for
    /// layers fed directly by data).
    pub fn backward_with(
        &self,
        saved: Option<&Saved>,
        upstream: &Tensor,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        let name = self.spec.name();
        let saved = saved.ok_or_else(|| Error::MissingState(name.into()))?;
        let p = &self.params;
        let mismatch =
            || Error::MissingState(format!("{name} (state from a different layer kind)"));
        match (&self.spec, saved) {
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                },
                Saved::Conv2d { input },
            ) => {
                let geom = conv::ConvGeom {
                    in_ch: *in_channels,
                    out_ch: *out_channels,
                    kh: kernel[0],
                    kw: kernel[1],
                    h: input.dim(2),
                    w: input.dim(3),
                };
                expect_same_len(
                    name,
                    upstream,
                    input.dim(0) * out_channels * geom.h * geom.w,
                )?;
                let (dx, dw, db) =
                    conv::backward(&geom, &p[0].value, input, upstream, need_input_grad);
                Ok((dx, vec![dw, db]))
            }
            (
                LayerSpec::BatchNorm { .. },
                Saved::BatchNorm {
                    x_hat,
                    inv_std,
                    mode,
                    ..
                },
            ) => {
                expect_same_len(name, upstream, x_hat.len())?;
                let (dx, dg, db) = norm::backward(
                    x_hat,
                    inv_std,
                    p[0].value.data(),
                    upstream,
                    *mode == Mode::Train,
                );
                Ok((Some(dx), vec![dg, db]))
            }
            (LayerSpec::Elu, Saved::Elu { output }) => {
                expect_same_len(name, upstream, output.len())?;
                let mut dx = upstream.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(output.data()) {
                    if *y <= 0.0 {
                        *d *= y + 1.0;
                    }
                }
                Ok((Some(dx), Vec::new()))
            }
            (
                LayerSpec::PoolMaxAvgSum { rate },
                Saved::Pool {
                    input_shape,
                    argmax,
                },
            ) => {
                expect_same_len(name, upstream, argmax.len())?;
                Ok((
                    Some(pool::backward(input_shape, *rate, argmax, upstream)),
                    Vec::new(),
                ))
            }
            (
                LayerSpec::BiGru {
                    input_size,
                    hidden_size,
                },
                Saved::BiGru {
                    input,
                    forward,
                    backward,
                },
            ) => {
                let geom = gru::GruGeom {
                    batch: input.dim(0),
                    steps: input.dim(1),
                    input: *input_size,
                    hidden: *hidden_size,
                };
                expect_same_len(name, upstream, geom.batch * geom.steps * 2 * hidden_size)?;
                let mut dx = Tensor::zeros(input.shape());
                let mut grads = Vec::with_capacity(8);
                for (dir, trace) in [forward, backward].into_iter().enumerate() {
                    let mut g: [Tensor; 4] =
                        std::array::from_fn(|i| Tensor::zeros(p[dir * 4 + i].value.shape()));
                    gru::backward_direction(
                        &geom,
                        &self.direction(dir),
                        input.data(),
                        trace,
                        upstream.data(),
                        &mut g,
                        dx.data_mut(),
                    );
                    grads.extend(g);
                }
                Ok((Some(dx), grads))
            }
            (LayerSpec::Linear { out_features, .. }, Saved::Linear { input }) => {
                expect_same_len(name, upstream, input.dim(0) * out_features)?;
                let (dx, dw, db) = linear::backward(&p[0].value, input, upstream);
                Ok((Some(dx), vec![dw, db]))
            }
            _ => Err(mismatch()),
        }
    }

    /// Adds `grads` into the parameter accumulators.
    pub fn accumulate(&mut self, grads: &[Tensor]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad.add_assign(g);
        }
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn commit(&mut self, saved: &Saved) {
        if let Saved::BatchNorm {
            batch_stats: Some((mean, var)),
            ..
        } = saved
        {
            let m = norm::MOMENTUM;
            for (r, v) in self.buffers[0].data_mut().iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in self.buffers[1].data_mut().iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }
}

fn expect_same_len(context: &str, upstream: &Tensor, expected: usize) -> Result<()> {
    if upstream.len() != expected {
        return Err(Error::shape(
            context,
            "upstream gradient size",
            expected,
            upstream.len(),
        ));
    }
    Ok(())
}
