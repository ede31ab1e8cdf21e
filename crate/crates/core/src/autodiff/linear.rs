//! Fully connected layer `y = x Wᵀ + b` on `[rows, in]` inputs.

use crate::linalg::gemm;
use crate::tensor::Tensor;

pub(crate) fn forward(weight: &Tensor, bias: &Tensor, x: &Tensor) -> Tensor {
    let (out_f, in_f) = (weight.dim(0), weight.dim(1));
    let rows = x.dim(0);
    let mut y = Tensor::zeros(&[rows, out_f]);
    for row in y.data_mut().chunks_exact_mut(out_f) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        rows,
        in_f,
        out_f,
        1.0,
        x.data(),
        false,
        weight.data(),
        true,
        1.0,
        y.data_mut(),
    );
    y
}

pub(crate) fn backward(weight: &Tensor, x: &Tensor, upstream: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (out_f, in_f) = (weight.dim(0), weight.dim(1));
    let rows = x.dim(0);
    let mut dx = Tensor::zeros(x.shape());
    gemm(
        rows,
        out_f,
        in_f,
        1.0,
        upstream.data(),
        false,
        weight.data(),
        false,
        0.0,
        dx.data_mut(),
    );
    let mut dw = Tensor::zeros(weight.shape());
    gemm(
        out_f,
        rows,
        in_f,
        1.0,
        upstream.data(),
        true,
        x.data(),
        false,
        0.0,
        dw.data_mut(),
    );
    let mut db = Tensor::zeros(&[out_f]);
    for row in upstream.data().chunks_exact(out_f) {
        for (d, v) in db.data_mut().iter_mut().zip(row) {
            *d += v;
        }
    }
    (dx, dw, db)
}
