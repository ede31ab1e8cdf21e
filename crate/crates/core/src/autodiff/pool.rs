//! Sum of max- and average-pooling over non-overlapping windows of the last
//! axis. Trailing bins that do not fill a window are dropped.

use crate::tensor::Tensor;

pub(crate) fn forward(x: &Tensor, rate: usize) -> (Tensor, Vec<u32>) {
    let width = *x.shape().last().expect("rank >= 1");
    let out_width = width / rate;
    let rows = x.len() / width;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_width;
    let mut y = Tensor::zeros(&shape);
    let mut argmax = vec![0u32; rows * out_width];
    let inv = 1.0 / rate as f64;
    for r in 0..rows {
        let src = &x.data()[r * width..(r + 1) * width];
        for o in 0..out_width {
            let window = &src[o * rate..(o + 1) * rate];
            let mut best = 0;
            let mut sum = 0.0;
            for (i, v) in window.iter().enumerate() {
                if *v > window[best] {
                    best = i;
                }
                sum += v;
            }
            y.data_mut()[r * out_width + o] = window[best] + sum * inv;
            argmax[r * out_width + o] = best as u32;
        }
    }
    (y, argmax)
}

pub(crate) fn backward(
    input_shape: &[usize],
    rate: usize,
    argmax: &[u32],
    upstream: &Tensor,
) -> Tensor {
    let width = *input_shape.last().unwrap();
    let out_width = width / rate;
    let mut dx = Tensor::zeros(input_shape);
    let rows = dx.len() / width;
    let inv = 1.0 / rate as f64;
    for r in 0..rows {
        let dst = &mut dx.data_mut()[r * width..(r + 1) * width];
        for o in 0..out_width {
            let g = upstream.data()[r * out_width + o];
            let window = &mut dst[o * rate..(o + 1) * rate];
            window.iter_mut().for_each(|d| *d += g * inv);
            window[argmax[r * out_width + o] as usize] += g;
        }
    }
    dx
}
