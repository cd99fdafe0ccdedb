use super::{GradBuf, Node};
use crate::error::{Error, Result};
use crate::gemm::{gemm, View};
use crate::tensor::Tensor;

/// Resolved geometry of one `a · op(b)` call.
struct Plan {
    batches: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is one matrix reused for every batch of `a`.
    shared_b: bool,
    out_shape: Vec<usize>,
}

impl Plan {
    fn b_view(&self, trans_b: bool) -> View {
        if trans_b {
            View::dense(self.n, self.k).t()
        } else {
            View::dense(self.k, self.n)
        }
    }
}

fn plan(a: &[usize], b: &[usize], trans_b: bool) -> Result<Plan> {
    let err = || Error::dim("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b { (b[b.len() - 1], b[b.len() - 2]) } else { (b[b.len() - 2], b[b.len() - 1]) };
    if k != bk {
        return Err(err());
    }
    let a_batch = &a[..a.len() - 2];
    let mut out_shape = a_batch.to_vec();
    out_shape.extend([m, n]);
    if b.len() == 2 {
        let rows = a_batch.iter().product::<usize>() * m;
        return Ok(Plan { batches: 1, m: rows, k, n, shared_b: true, out_shape });
    }
    if &b[..b.len() - 2] != a_batch {
        return Err(err());
    }
    Ok(Plan { batches: a_batch.iter().product(), m, k, n, shared_b: false, out_shape })
}

pub(super) fn matmul_forward(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let p = plan(a.shape(), b.shape(), trans_b)?;
    let mut out = vec![0.0; p.batches * p.m * p.n];
    let (sa, sb, sc) = (p.m * p.k, if p.shared_b { 0 } else { p.k * p.n }, p.m * p.n);
    for i in 0..p.batches {
        gemm(
            &a.data()[i * sa..],
            View::dense(p.m, p.k),
            &b.data()[i * sb..],
            p.b_view(trans_b),
            0.0,
            &mut out[i * sc..],
            View::dense(p.m, p.n),
        );
    }
    Tensor::new(&p.out_shape, out)
}

pub(super) fn matmul_backward(nodes: &[Node], _out: usize, a: usize, b: usize, trans_b: bool, g: &[f64], buf: &mut GradBuf) {
    let (av, bv) = (&nodes[a].value, &nodes[b].value);
    let p = plan(av.shape(), bv.shape(), trans_b).expect("validated in forward");
    let (sa, sb, sc) = (p.m * p.k, if p.shared_b { 0 } else { p.k * p.n }, p.m * p.n);
    let bview = p.b_view(trans_b);
    if nodes[a].requires_grad {
        let da = buf.slot(a, av.len());
        for i in 0..p.batches {
            // dA = dC · op(B)ᵀ
            gemm(&g[i * sc..], View::dense(p.m, p.n), &bv.data()[i * sb..], bview.t(), 1.0, &mut da[i * sa..], View::dense(p.m, p.k));
        }
    }
    if nodes[b].requires_grad {
        let db = buf.slot(b, bv.len());
        for i in 0..p.batches {
            // d op(B) = Aᵀ · dC, written through op(B)'s own view.
            gemm(&av.data()[i * sa..], View::dense(p.m, p.k).t(), &g[i * sc..], View::dense(p.m, p.n), 1.0, &mut db[i * sb..], bview);
        }
    }
}
