//! Bidirectional GRU. Gates are ordered (reset, update, candidate):
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + W_hn (r ⊙ h) + b_hn)
//! h' = (1 - z) ⊙ n + z ⊙ h
//! ```

use crate::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct GruGeom {
    pub batch: usize,
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
}

/// Per-direction weights: `w_ih [3H, D]`, `w_hh [3H, H]`, `b_ih [3H]`, `b_hh [3H]`.
pub(crate) struct DirectionParams<'a> {
    pub w_ih: &'a Tensor,
    pub w_hh: &'a Tensor,
    pub b_ih: &'a Tensor,
    pub b_hh: &'a Tensor,
}

/// Activations saved per step, indexed in processing order.
#[derive(Clone, Debug)]
pub struct DirectionTrace {
    reverse: bool,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn time_index(g: &GruGeom, step: usize, reverse: bool) -> usize {
    if reverse {
        g.steps - 1 - step
    } else {
        step
    }
}

/// Runs one direction over `x [B, T, D]`, writing hidden states into
/// `out [B, T, 2H]` at column offset `dir * H`.
pub(crate) fn forward_direction(
    g: &GruGeom,
    p: &DirectionParams,
    x: &[f64],
    reverse: bool,
    out: &mut [f64],
) -> DirectionTrace {
    let (b_n, t_n, h) = (g.batch, g.steps, g.hidden);
    let h3 = 3 * h;
    let mut gi = vec![0.0; b_n * t_n * h3];
    for row in gi.chunks_exact_mut(h3) {
        row.copy_from_slice(p.b_ih.data());
    }
    gemm(
        b_n * t_n,
        g.input,
        h3,
        1.0,
        x,
        false,
        p.w_ih.data(),
        true,
        1.0,
        &mut gi,
    );

    let mut trace = DirectionTrace {
        reverse,
        h_prev: vec![0.0; t_n * b_n * h],
        r: vec![0.0; t_n * b_n * h],
        z: vec![0.0; t_n * b_n * h],
        n: vec![0.0; t_n * b_n * h],
        rh: vec![0.0; t_n * b_n * h],
    };
    let w_rz = &p.w_hh.data()[..2 * h * h];
    let w_n = &p.w_hh.data()[2 * h * h..];
    let b_hh = p.b_hh.data();
    let col = if reverse { h } else { 0 };

    let mut hcur = vec![0.0; b_n * h];
    let mut ghrz = vec![0.0; b_n * 2 * h];
    let mut ghn = vec![0.0; b_n * h];
    for s in 0..t_n {
        let t = time_index(g, s, reverse);
        let base = s * b_n * h;
        trace.h_prev[base..base + b_n * h].copy_from_slice(&hcur);
        for row in ghrz.chunks_exact_mut(2 * h) {
            row.copy_from_slice(&b_hh[..2 * h]);
        }
        gemm(b_n, h, 2 * h, 1.0, &hcur, false, w_rz, true, 1.0, &mut ghrz);
        for b in 0..b_n {
            let gi_row = &gi[(b * t_n + t) * h3..(b * t_n + t + 1) * h3];
            for j in 0..h {
                let i = base + b * h + j;
                let r = sigmoid(gi_row[j] + ghrz[b * 2 * h + j]);
                let z = sigmoid(gi_row[h + j] + ghrz[b * 2 * h + h + j]);
                trace.r[i] = r;
                trace.z[i] = z;
                trace.rh[i] = r * hcur[b * h + j];
            }
        }
        for row in ghn.chunks_exact_mut(h) {
            row.copy_from_slice(&b_hh[2 * h..]);
        }
        gemm(
            b_n,
            h,
            h,
            1.0,
            &trace.rh[base..base + b_n * h],
            false,
            w_n,
            true,
            1.0,
            &mut ghn,
        );
        for b in 0..b_n {
            let gi_row = &gi[(b * t_n + t) * h3..(b * t_n + t + 1) * h3];
            for j in 0..h {
                let i = base + b * h + j;
                let n = (gi_row[2 * h + j] + ghn[b * h + j]).tanh();
                trace.n[i] = n;
                let z = trace.z[i];
                let hn = (1.0 - z) * n + z * hcur[b * h + j];
                hcur[b * h + j] = hn;
                out[(b * t_n + t) * 2 * h + col + j] = hn;
            }
        }
    }
    trace
}

/// Accumulates parameter gradients into `grads = [dw_ih, dw_hh, db_ih, db_hh]`
/// and input gradients into `dx`.
pub(crate) fn backward_direction(
    g: &GruGeom,
    p: &DirectionParams,
    x: &[f64],
    trace: &DirectionTrace,
    upstream: &[f64],
    grads: &mut [Tensor; 4],
    dx: &mut [f64],
) {
    let (b_n, t_n, h) = (g.batch, g.steps, g.hidden);
    let h3 = 3 * h;
    let col = if trace.reverse { h } else { 0 };
    let w_rz = &p.w_hh.data()[..2 * h * h];
    let w_n = &p.w_hh.data()[2 * h * h..];

    let mut dgi = vec![0.0; b_n * t_n * h3];
    let mut dh_next = vec![0.0; b_n * h];
    let mut dan = vec![0.0; b_n * h];
    let mut drh = vec![0.0; b_n * h];
    let mut darz = vec![0.0; b_n * 2 * h];
    let mut dh_prev = vec![0.0; b_n * h];
    let [dw_ih, dw_hh, db_ih, db_hh] = grads;

    for s in (0..t_n).rev() {
        let t = time_index(g, s, trace.reverse);
        let base = s * b_n * h;
        for b in 0..b_n {
            for j in 0..h {
                let i = base + b * h + j;
                let dh = upstream[(b * t_n + t) * 2 * h + col + j] + dh_next[b * h + j];
                let (z, n, hp) = (trace.z[i], trace.n[i], trace.h_prev[i]);
                let dn = dh * (1.0 - z);
                let dz = dh * (hp - n);
                dh_prev[b * h + j] = dh * z;
                let a = dn * (1.0 - n * n);
                dan[b * h + j] = a;
                darz[b * 2 * h + h + j] = dz * z * (1.0 - z);
                dgi[(b * t_n + t) * h3 + 2 * h + j] = a;
                db_hh.data_mut()[2 * h + j] += a;
            }
        }
        gemm(
            h,
            b_n,
            h,
            1.0,
            &dan,
            true,
            &trace.rh[base..base + b_n * h],
            false,
            1.0,
            &mut dw_hh.data_mut()[2 * h * h..],
        );
        gemm(b_n, h, h, 1.0, &dan, false, w_n, false, 0.0, &mut drh);
        for b in 0..b_n {
            for j in 0..h {
                let i = base + b * h + j;
                let r = trace.r[i];
                let dr = drh[b * h + j] * trace.h_prev[i];
                dh_prev[b * h + j] += drh[b * h + j] * r;
                let ar = dr * r * (1.0 - r);
                darz[b * 2 * h + j] = ar;
                let gi_row = &mut dgi[(b * t_n + t) * h3..];
                gi_row[j] = ar;
                gi_row[h + j] = darz[b * 2 * h + h + j];
            }
        }
        for row in darz.chunks_exact(2 * h) {
            for (d, v) in db_hh.data_mut()[..2 * h].iter_mut().zip(row) {
                *d += v;
            }
        }
        gemm(
            2 * h,
            b_n,
            h,
            1.0,
            &darz,
            true,
            &trace.h_prev[base..base + b_n * h],
            false,
            1.0,
            &mut dw_hh.data_mut()[..2 * h * h],
        );
        gemm(
            b_n,
            2 * h,
            h,
            1.0,
            &darz,
            false,
            w_rz,
            false,
            1.0,
            &mut dh_prev,
        );
        std::mem::swap(&mut dh_next, &mut dh_prev);
    }

    for row in dgi.chunks_exact(h3) {
        for (d, v) in db_ih.data_mut().iter_mut().zip(row) {
            *d += v;
        }
    }
    gemm(
        h3,
        b_n * t_n,
        g.input,
        1.0,
        &dgi,
        true,
        x,
        false,
        1.0,
        dw_ih.data_mut(),
    );
    gemm(
        b_n * t_n,
        h3,
        g.input,
        1.0,
        &dgi,
        false,
        p.w_ih.data(),
        false,
        1.0,
        dx,
    );
}
