//! Elementwise activations, softmax and layer normalization.

use super::{GradBuf, Node};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(super) fn silu_backward(x: &Tensor, g: &[f64], dx: &mut [f64]) {
    for ((d, &g), &v) in dx.iter_mut().zip(g).zip(x.data()) {
        let s = sigmoid(v);
        *d += g * s * (1.0 + v * (1.0 - s));
    }
}

pub(super) fn sigmoid_backward(y: &Tensor, g: &[f64], dx: &mut [f64]) {
    for ((d, &g), &s) in dx.iter_mut().zip(g).zip(y.data()) {
        *d += g * s * (1.0 - s);
    }
}

fn last_extent(shape: &[usize]) -> usize {
    *shape.last().expect("tensors have rank >= 1")
}

pub(super) fn softmax_forward(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NumericDomain { op: "softmax_lastdim", detail: "non-finite input".into() });
    }
    let n = last_extent(x.shape());
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

pub(super) fn softmax_backward(y: &Tensor, g: &[f64], dx: &mut [f64]) {
    let n = last_extent(y.shape());
    for ((yr, gr), dr) in y.data().chunks_exact(n).zip(g.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (gv - dot);
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(super) fn layer_norm_forward(nodes: &[Node], x: usize, gain: usize, bias: usize, eps: f64) -> Result<Tensor> {
    let (x, gain, bias) = (&nodes[x].value, &nodes[gain].value, &nodes[bias].value);
    let n = last_extent(x.shape());
    if gain.shape() != [n] {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    if bias.shape() != [n] {
        return Err(Error::dim("layer_norm", x.shape(), bias.shape()));
    }
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let (mean, rstd) = row_stats(row, eps);
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (*v - mean) * rstd * g + b;
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn layer_norm_backward(nodes: &[Node], _out: usize, x: usize, gain: usize, bias: usize, eps: f64, g: &[f64], buf: &mut GradBuf) {
    let xv = &nodes[x].value;
    let gv = nodes[gain].value.data();
    let n = gv.len();
    let rows = xv.len() / n;

    let mut xhat = vec![0.0; xv.len()];
    let mut rstds = vec![0.0; rows];
    for (r, (row, hat)) in xv.data().chunks_exact(n).zip(xhat.chunks_exact_mut(n)).enumerate() {
        let (mean, rstd) = row_stats(row, eps);
        rstds[r] = rstd;
        for (h, &v) in hat.iter_mut().zip(row) {
            *h = (v - mean) * rstd;
        }
    }

    if nodes[gain].requires_grad {
        let dg = buf.slot(gain, n);
        for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
            for ((d, &a), &b) in dg.iter_mut().zip(gr).zip(hr) {
                *d += a * b;
            }
        }
    }
    if nodes[bias].requires_grad {
        let db = buf.slot(bias, n);
        for gr in g.chunks_exact(n) {
            db.iter_mut().zip(gr).for_each(|(d, &a)| *d += a);
        }
    }
    if nodes[x].requires_grad {
        let dx = buf.slot(x, xv.len());
        let mut dhat = vec![0.0; n];
        for (r, ((gr, hr), dr)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).zip(dx.chunks_exact_mut(n)).enumerate() {
            for ((d, &a), &w) in dhat.iter_mut().zip(gr).zip(gv) {
                *d = a * w;
            }
            let m1 = dhat.iter().sum::<f64>() / n as f64;
            let m2 = dhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            for ((d, &dh), &h) in dr.iter_mut().zip(&dhat).zip(hr) {
                *d += rstds[r] * (dh - m1 - h * m2);
            }
        }
    }
}
