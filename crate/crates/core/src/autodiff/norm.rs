//! Batch normalization over all axes except the channel axis (axis 1).

use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-5;
pub const MOMENTUM: f64 = 0.1;

pub(crate) struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

fn layout(x: &Tensor) -> (usize, usize, usize) {
    let batch = x.dim(0);
    let channels = x.dim(1);
    let spatial = x.shape()[2..].iter().product::<usize>();
    (batch, channels, spatial)
}

pub(crate) fn batch_stats(x: &Tensor) -> BatchStats {
    let (batch, channels, spatial) = layout(x);
    let count = batch * spatial;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let start = (b * channels + c) * spatial;
            mean[c] += x.data()[start..start + spatial].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for b in 0..batch {
        for c in 0..channels {
            let start = (b * channels + c) * spatial;
            var[c] += x.data()[start..start + spatial]
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    BatchStats { mean, var, count }
}

/// Normalizes with the given statistics; returns `(y, x_hat)`.
pub(crate) fn normalize(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Tensor, Tensor) {
    let (batch, channels, spatial) = layout(x);
    let mut y = Tensor::zeros(x.shape());
    let mut x_hat = Tensor::zeros(x.shape());
    for b in 0..batch {
        for c in 0..channels {
            let start = (b * channels + c) * spatial;
            let src = &x.data()[start..start + spatial];
            let xh = &mut x_hat.data_mut()[start..start + spatial];
            for (d, s) in xh.iter_mut().zip(src) {
                *d = (s - mean[c]) * inv_std[c];
            }
            let out = &mut y.data_mut()[start..start + spatial];
            for (d, s) in out.iter_mut().zip(xh.iter()) {
                *d = gamma[c] * s + beta[c];
            }
        }
    }
    (y, x_hat)
}

/// Gradients `(dx, dgamma, dbeta)`. In train mode the batch statistics
/// depend on `x`, which adds the mean-centering terms.
pub(crate) fn backward(
    x_hat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
    upstream: &Tensor,
    train: bool,
) -> (Tensor, Tensor, Tensor) {
    let (batch, channels, spatial) = layout(x_hat);
    let count = (batch * spatial) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let start = (b * channels + c) * spatial;
            let dy = &upstream.data()[start..start + spatial];
            let xh = &x_hat.data()[start..start + spatial];
            dbeta[c] += dy.iter().sum::<f64>();
            dgamma[c] += dy.iter().zip(xh).map(|(g, v)| g * v).sum::<f64>();
        }
    }
    let mut dx = Tensor::zeros(x_hat.shape());
    for b in 0..batch {
        for c in 0..channels {
            let start = (b * channels + c) * spatial;
            let dy = &upstream.data()[start..start + spatial];
            let xh = &x_hat.data()[start..start + spatial];
            let out = &mut dx.data_mut()[start..start + spatial];
            let scale = gamma[c] * inv_std[c];
            if train {
                for ((d, g), v) in out.iter_mut().zip(dy).zip(xh) {
                    *d = scale * (g - dbeta[c] / count - v * dgamma[c] / count);
                }
            } else {
                for (d, g) in out.iter_mut().zip(dy) {
                    *d = scale * g;
                }
            }
        }
    }
    (
        dx,
        Tensor::from_vec(&[channels], dgamma).expect("channel vector"),
        Tensor::from_vec(&[channels], dbeta).expect("channel vector"),
    )
}
