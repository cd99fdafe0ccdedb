//! Causal 3D convolution via im2col + gemm.
//!
//! Time is padded on the past side only, with `kT - 1` copies of the first
//! frame, so output frame `τ` depends on input frames `≤ τ·sT` and a
//! constant-in-time input gives a constant-in-time output. Height and width
//! use symmetric zero padding of `(k - 1) / 2`.

use super::{GradBuf, Node};
use crate::error::{Error, Result};
use crate::gemm::{gemm, View};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// Leading (past / top / left) padding per axis.
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: (usize, usize, usize)) -> Result<Self> {
        let stride = [stride.0, stride.1, stride.2];
        if stride.contains(&0) {
            return Err(Error::Config(format!("conv3d stride must be positive, got {stride:?}")));
        }
        if x_shape.len() != 4 || k_shape.len() != 5 || k_shape[1] != x_shape[0] {
            return Err(Error::dim("conv3d_causal", x_shape, k_shape));
        }
        let input = [x_shape[1], x_shape[2], x_shape[3]];
        let kernel = [k_shape[2], k_shape[3], k_shape[4]];
        let pad = [kernel[0] - 1, (kernel[1] - 1) / 2, (kernel[2] - 1) / 2];
        let mut output = [0; 3];
        for ax in 0..3 {
            let padded = if ax == 0 { input[0] + pad[0] } else { input[ax] + kernel[ax] - 1 };
            if kernel[ax] > padded {
                return Err(Error::dim("conv3d_causal", x_shape, k_shape));
            }
            output[ax] = (padded - kernel[ax]) / stride[ax] + 1;
        }
        Ok(Self { c_in: x_shape[0], c_out: k_shape[0], input, kernel, stride, pad, output })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    /// Visits `(col_row, out_position, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [t, h, w] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let mut row = 0;
        for ci in 0..self.c_in {
            for a in 0..kt {
                for b in 0..kh {
                    for c in 0..kw {
                        for to in 0..ot {
                            let ti = (to * st + a).saturating_sub(pt);
                            if ti >= t {
                                continue;
                            }
                            for ho in 0..oh {
                                let Some(hi) = (ho * sh + b).checked_sub(ph).filter(|&v| v < h) else {
                                    continue;
                                };
                                let base_in = ((ci * t + ti) * h + hi) * w;
                                let base_out = (to * oh + ho) * ow;
                                for wo in 0..ow {
                                    let Some(wi) = (wo * sw + c).checked_sub(pw).filter(|&v| v < w) else {
                                        continue;
                                    };
                                    f(row, base_out + wo, base_in + wi);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut col = vec![0.0; self.patch_len() * p];
        self.for_each_tap(|r, o, i| col[r * p + o] = x[i]);
        col
    }
}

pub(super) fn conv3d_forward(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: (usize, usize, usize)) -> Result<(Tensor, ConvGeometry)> {
    let geom = ConvGeometry::new(x.shape(), kernel.shape(), stride)?;
    if bias.shape() != [geom.c_out] {
        return Err(Error::dim("conv3d_causal", kernel.shape(), bias.shape()));
    }
    let (ck, p) = (geom.patch_len(), geom.positions());
    let col = geom.im2col(x.data());
    let mut out = vec![0.0; geom.c_out * p];
    for (row, &b) in out.chunks_exact_mut(p).zip(bias.data()) {
        row.fill(b);
    }
    gemm(kernel.data(), View::dense(geom.c_out, ck), &col, View::dense(ck, p), 1.0, &mut out, View::dense(geom.c_out, p));
    let [ot, oh, ow] = geom.output;
    let t = Tensor::new(&[geom.c_out, ot, oh, ow], out)?;
    Ok((t, geom))
}

pub(super) fn conv3d_backward(nodes: &[Node], x: usize, kernel: usize, bias: usize, geom: &ConvGeometry, g: &[f64], buf: &mut GradBuf) {
    let (ck, p) = (geom.patch_len(), geom.positions());
    let kv = &nodes[kernel].value;
    if nodes[bias].requires_grad {
        let db = buf.slot(bias, geom.c_out);
        for (d, row) in db.iter_mut().zip(g.chunks_exact(p)) {
            *d += row.iter().sum::<f64>();
        }
    }
    if nodes[kernel].requires_grad {
        let col = geom.im2col(nodes[x].value.data());
        let dk = buf.slot(kernel, kv.len());
        gemm(g, View::dense(geom.c_out, p), &col, View::dense(ck, p).t(), 1.0, dk, View::dense(geom.c_out, ck));
    }
    if nodes[x].requires_grad {
        let mut dcol = vec![0.0; ck * p];
        gemm(kv.data(), View::dense(geom.c_out, ck).t(), g, View::dense(geom.c_out, p), 0.0, &mut dcol, View::dense(ck, p));
        let dx = buf.slot(x, nodes[x].value.len());
        geom.for_each_tap(|r, o, i| dx[i] += dcol[r * p + o]);
    }
}
