//! Data-movement operations: permute, narrow, concat, upsample.

use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

/// Calls `f(out_index, in_offset)` for every element of the permuted tensor.
fn permute_walk(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for out in 0..total {
        f(out, offset);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(super) fn permute_forward(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim("permute", x.shape(), perm));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    permute_walk(x.shape(), perm, |o, i| out[o] = src[i]);
    Tensor::new(&out_shape, out)
}

pub(super) fn permute_backward(x: &Tensor, perm: &[usize], g: &[f64], dx: &mut [f64]) {
    permute_walk(x.shape(), perm, |o, i| dx[i] += g[o]);
}

/// `(outer, extent, inner)` decomposition around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn narrow_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::dim("narrow", x.shape(), &[axis, start, len]));
    }
    let (outer, extent, inner) = split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

pub(super) fn narrow_backward(in_shape: &[usize], out_shape: &[usize], axis: usize, start: usize, g: &[f64], dx: &mut [f64]) {
    let (outer, extent, inner) = split(in_shape, axis);
    let len = out_shape[axis];
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        let src = &g[o * len * inner..(o + 1) * len * inner];
        dx[base..base + len * inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
    }
}

pub(super) fn concat_forward(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0];
    if axis >= first.rank() {
        return Err(Error::dim("concat", first.shape(), &[axis]));
    }
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank() && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::dim("concat", first.shape(), p.shape()));
        }
        total += p.shape()[axis];
    }
    let (outer, _, inner) = split(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

pub(super) fn concat_backward(out_shape: &[usize], part_shape: &[usize], axis: usize, offset: usize, g: &[f64], dx: &mut [f64]) {
    let (outer, total, inner) = split(out_shape, axis);
    let len = part_shape[axis];
    for o in 0..outer {
        let base = (o * total + offset) * inner;
        dx[o * len * inner..(o + 1) * len * inner].iter_mut().zip(&g[base..base + len * inner]).for_each(|(d, &s)| *d += s);
    }
}

fn upsample_dims(shape: &[usize], f: [usize; 3]) -> Result<[usize; 4]> {
    if shape.len() != 4 || f.contains(&0) {
        return Err(Error::dim("upsample_nearest", shape, &f));
    }
    Ok([shape[0], shape[1] * f[0], shape[2] * f[1], shape[3] * f[2]])
}

/// Calls `f(out_index, in_index)` for every output element.
fn upsample_walk(shape: &[usize], f: [usize; 3], mut visit: impl FnMut(usize, usize)) {
    let [c, t, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let (ot, oh, ow) = (t * f[0], h * f[1], w * f[2]);
    let mut o = 0;
    for ci in 0..c {
        for ti in 0..ot {
            for hi in 0..oh {
                let row = ((ci * t + ti / f[0]) * h + hi / f[1]) * w;
                for wi in 0..ow {
                    visit(o, row + wi / f[2]);
                    o += 1;
                }
            }
        }
    }
}

pub(super) fn upsample_forward(x: &Tensor, f: [usize; 3]) -> Result<Tensor> {
    let dims = upsample_dims(x.shape(), f)?;
    let mut out = vec![0.0; dims.iter().product()];
    let src = x.data();
    upsample_walk(x.shape(), f, |o, i| out[o] = src[i]);
    Tensor::new(&dims, out)
}

pub(super) fn upsample_backward(in_shape: &[usize], f: [usize; 3], g: &[f64], dx: &mut [f64]) {
    upsample_walk(in_shape, f, |o, i| dx[i] += g[o]);
}
