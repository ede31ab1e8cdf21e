//! Stride-1 2-D convolution with "same" zero padding, as a GEMM over
//! tiles of unfolded rows. A tile covers a few output rows so that its
//! unfolded copy stays cache-sized.

use crate::error::Result;
use crate::linalg::gemm_strided;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub h: usize,
    pub w: usize,
}

/// Target size of one unfolded tile, in elements.
const TILE_ELEMS: usize = 1 << 15;

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn tile_rows(&self) -> usize {
        (TILE_ELEMS / (self.patch() * self.w)).clamp(1, self.h)
    }

    /// Geometry of the input-gradient pass, a convolution of the upstream
    /// gradient with the flipped, transposed kernel.
    fn transposed(&self) -> ConvGeom {
        ConvGeom {
            in_ch: self.out_ch,
            out_ch: self.in_ch,
            ..*self
        }
    }
}

/// Unfolds output rows `t0..t1` of one `[C, H, W]` sample into a
/// `[C*kh*kw, (t1-t0)*W]` tile.
fn unfold(g: &ConvGeom, x: &[f64], t0: usize, t1: usize, cols: &mut [f64]) {
    let w = g.w;
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let plane = g.plane();
    let tile = (t1 - t0) * w;
    for c in 0..g.in_ch {
        let src_plane = &x[c * plane..(c + 1) * plane];
        for i in 0..g.kh {
            let di = i as isize - ph;
            for j in 0..g.kw {
                let dj = j as isize - pw;
                let row = ((c * g.kh + i) * g.kw + j) * tile;
                let dst_rows = &mut cols[row..row + tile];
                // valid output columns f satisfy 0 <= f + dj < w
                let f_lo = (-dj).max(0) as usize;
                let f_hi = (w as isize - dj).clamp(0, w as isize) as usize;
                for (r, t) in (t0..t1).enumerate() {
                    let st = t as isize + di;
                    let dst = &mut dst_rows[r * w..(r + 1) * w];
                    if st < 0 || st >= g.h as isize || f_lo >= f_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &src_plane[st as usize * w..(st as usize + 1) * w];
                    dst[..f_lo].fill(0.0);
                    dst[f_hi..].fill(0.0);
                    let s_lo = (f_lo as isize + dj) as usize;
                    dst[f_lo..f_hi].copy_from_slice(&src[s_lo..s_lo + (f_hi - f_lo)]);
                }
            }
        }
    }
}

/// `y = conv(x)` for one sample, with `y` pre-filled (bias or zeros).
fn conv_sample(g: &ConvGeom, weight: &[f64], x: &[f64], y: &mut [f64], cols: &mut [f64]) {
    let (plane, k) = (g.plane(), g.patch());
    let rows = g.tile_rows();
    let mut t0 = 0;
    while t0 < g.h {
        let t1 = (t0 + rows).min(g.h);
        let tile = (t1 - t0) * g.w;
        unfold(g, x, t0, t1, cols);
        // y[o, px] += Σ_k W[o, k] cols[k, px], computed as the
        // (px × k)(k × o) product so the long axis drives the kernel
        gemm_strided(
            tile,
            k,
            g.out_ch,
            (&cols[..k * tile], 1, tile as isize),
            (weight, 1, k as isize),
            &mut y[t0 * g.w..],
            (1, plane as isize),
        );
        t0 = t1;
    }
}

fn tile_buffer(g: &ConvGeom) -> Vec<f64> {
    vec![0.0; g.patch() * g.tile_rows() * g.w]
}

pub(crate) fn forward(g: &ConvGeom, weight: &Tensor, bias: &Tensor, input: &Tensor) -> Result<Tensor> {
    let batch = input.dim(0);
    let plane = g.plane();
    let mut out = Tensor::zeros(&[batch, g.out_ch, g.h, g.w]);
    let mut cols = tile_buffer(g);
    let in_stride = g.in_ch * plane;
    let out_stride = g.out_ch * plane;
    for b in 0..batch {
        let y = &mut out.data_mut()[b * out_stride..(b + 1) * out_stride];
        for (o, chunk) in y.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        let x = &input.data()[b * in_stride..(b + 1) * in_stride];
        conv_sample(g, weight.data(), x, y, &mut cols);
    }
    Ok(out)
}

/// `[out, in, kh, kw]` to `[in, out, kh, kw]` with both spatial axes
/// reversed.
fn flip_transpose(g: &ConvGeom, w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for o in 0..g.out_ch {
        for c in 0..g.in_ch {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    out[((c * g.out_ch + o) * g.kh + (g.kh - 1 - i)) * g.kw + (g.kw - 1 - j)] =
                        w[((o * g.in_ch + c) * g.kh + i) * g.kw + j];
                }
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`; `dx` is skipped when not requested.
pub(crate) fn backward(
    g: &ConvGeom,
    weight: &Tensor,
    input: &Tensor,
    upstream: &Tensor,
    need_input_grad: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let batch = input.dim(0);
    let (plane, k) = (g.plane(), g.patch());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[g.out_ch]);
    let mut dx = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let gt = g.transposed();
    let w_t = flip_transpose(g, weight.data());
    let mut cols = tile_buffer(g);
    let mut cols_t = if need_input_grad { tile_buffer(&gt) } else { Vec::new() };
    let in_stride = g.in_ch * plane;
    let out_stride = g.out_ch * plane;
    let rows = g.tile_rows();
    for b in 0..batch {
        let dy = &upstream.data()[b * out_stride..(b + 1) * out_stride];
        for (o, chunk) in dy.chunks_exact(plane).enumerate() {
            db.data_mut()[o] += chunk.iter().sum::<f64>();
        }
        let x = &input.data()[b * in_stride..(b + 1) * in_stride];
        let mut t0 = 0;
        while t0 < g.h {
            let t1 = (t0 + rows).min(g.h);
            let tile = (t1 - t0) * g.w;
            unfold(g, x, t0, t1, &mut cols);
            // dW[o, k] += Σ_px dy[o, px] cols[k, px], as (k × px)(px × o)
            gemm_strided(
                k,
                tile,
                g.out_ch,
                (&cols[..k * tile], tile as isize, 1),
                (&dy[t0 * g.w..], 1, plane as isize),
                dw.data_mut(),
                (1, k as isize),
            );
            t0 = t1;
        }
        if let Some(dx) = dx.as_mut() {
            let dx = &mut dx.data_mut()[b * in_stride..(b + 1) * in_stride];
            conv_sample(&gt, &w_t, dy, dx, &mut cols_t);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive(g: &ConvGeom, w: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
        let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
        let mut y = vec![0.0; g.out_ch * g.h * g.w];
        for o in 0..g.out_ch {
            for t in 0..g.h {
                for f in 0..g.w {
                    let mut acc = bias[o];
                    for c in 0..g.in_ch {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let st = t as isize + i as isize - ph;
                                let sf = f as isize + j as isize - pw;
                                if st >= 0 && sf >= 0 && (st as usize) < g.h && (sf as usize) < g.w
                                {
                                    acc += w[((o * g.in_ch + c) * g.kh + i) * g.kw + j]
                                        * x[(c * g.h + st as usize) * g.w + sf as usize];
                                }
                            }
                        }
                    }
                    y[(o * g.h + t) * g.w + f] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_nested_loops() {
        for &(kh, kw) in &[(3, 3), (1, 3), (1, 1), (5, 3)] {
            let g = ConvGeom {
                in_ch: 2,
                out_ch: 3,
                kh,
                kw,
                h: 4,
                w: 6,
            };
            let w: Vec<f64> = (0..3 * 2 * kh * kw)
                .map(|i| ((i * 7) as f64).sin())
                .collect();
            let bias = vec![0.1, -0.2, 0.3];
            let x: Vec<f64> = (0..2 * 4 * 6).map(|i| ((i * 3) as f64).cos()).collect();
            let y = forward(
                &g,
                &Tensor::from_vec(&[3, 2, kh, kw], w.clone()).unwrap(),
                &Tensor::from_vec(&[3], bias.clone()).unwrap(),
                &Tensor::from_vec(&[1, 2, 4, 6], x.clone()).unwrap(),
            )
            .unwrap();
            for (a, b) in y.data().iter().zip(naive(&g, &w, &bias, &x)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Adjoint of [`naive`] in `x` and `w`.
    fn naive_backward(g: &ConvGeom, w: &[f64], x: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        for o in 0..g.out_ch {
            for t in 0..g.h {
                for f in 0..g.w {
                    let d = dy[(o * g.h + t) * g.w + f];
                    for c in 0..g.in_ch {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let st = t as isize + i as isize - ph;
                                let sf = f as isize + j as isize - pw;
                                if st >= 0 && sf >= 0 && (st as usize) < g.h && (sf as usize) < g.w {
                                    let wi = ((o * g.in_ch + c) * g.kh + i) * g.kw + j;
                                    let xi = (c * g.h + st as usize) * g.w + sf as usize;
                                    dw[wi] += d * x[xi];
                                    dx[xi] += d * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dw)
    }

    #[test]
    fn backward_matches_nested_loops() {
        // the wide case spans several tiles
        for &(kh, kw, h, w) in &[(3, 3, 5, 11), (1, 3, 4, 7), (1, 1, 3, 5), (5, 3, 6, 9), (3, 3, 5, 2000)] {
            let g = ConvGeom { in_ch: 2, out_ch: 3, kh, kw, h, w };
            let n = |len: usize, k: f64| -> Vec<f64> { (0..len).map(|i| (i as f64 * k).sin()).collect() };
            let wt = n(6 * kh * kw, 0.7);
            let x = n(2 * h * w, 0.3);
            let dy = n(3 * h * w, 1.1);
            let (dx, dw, db) = backward(
                &g,
                &Tensor::from_vec(&[3, 2, kh, kw], wt.clone()).unwrap(),
                &Tensor::from_vec(&[1, 2, h, w], x.clone()).unwrap(),
                &Tensor::from_vec(&[1, 3, h, w], dy.clone()).unwrap(),
                true,
            );
            let (dx_ref, dw_ref) = naive_backward(&g, &wt, &x, &dy);
            let y = forward(
                &g,
                &Tensor::from_vec(&[3, 2, kh, kw], wt.clone()).unwrap(),
                &Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap(),
                &Tensor::from_vec(&[1, 2, h, w], x.clone()).unwrap(),
            )
            .unwrap();
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-9);
            assert!(close(y.data(), &naive(&g, &wt, &[0.1, -0.2, 0.3], &x)));
            assert!(close(dx.unwrap().data(), &dx_ref));
            assert!(close(dw.data(), &dw_ref));
            for o in 0..3 {
                let sum: f64 = dy[o * h * w..(o + 1) * h * w].iter().sum();
                assert!((db.data()[o] - sum).abs() < 1e-9);
            }
        }
    }
}
