//! Finite-difference gradient cases for every differentiable tape operation.
//!
//! Each case maps a seed to the worst relative error of `grad_check` on a
//! randomized small instance. Outputs are contracted against a random weight
//! tensor so that every output element contributes a distinct gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stillguard_core::{grad_check, Result, Tape, Tensor, Var};

pub type OpCase = (&'static str, fn(u64) -> f64);

pub const GRAD_STEP: f64 = 1e-5;

fn weighted<'t>(tape: &'t Tape, y: Var<'t>, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
    let w = Tensor::randn(&y.shape(), 1.0, rng);
    Ok(y.mul(tape.constant(w))?.sum())
}

/// Gradient check of `f(x)` with `x ~ N(0, 1)` of the given shape.
fn check(seed: u64, shape: &[usize], f: impl for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(shape, 1.0, &mut rng);
    let wseed = seed ^ 0x9e37_79b9;
    grad_check(
        |tape, x| {
            let mut r = ChaCha8Rng::seed_from_u64(wseed);
            let y = f(tape, x)?;
            weighted(tape, y, &mut r)
        },
        &x,
        GRAD_STEP,
    )
    .expect("grad_check runs")
}

fn other(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7)))
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", |s| check(s, &[3, 4], |t, x| x.add(t.constant(other(s, &[3, 4]))))),
        ("sub", |s| check(s, &[3, 4], |t, x| t.constant(other(s, &[3, 4])).sub(x))),
        ("mul", |s| check(s, &[3, 4], |t, x| x.mul(t.constant(other(s, &[3, 4]))))),
        ("mul_self", |s| check(s, &[5], |_, x| x.mul(x))),
        ("add_bias/x", |s| check(s, &[2, 3, 4], |t, x| x.add_bias(t.constant(other(s, &[4]))))),
        ("add_bias/bias", |s| check(s, &[4], |t, b| t.constant(other(s, &[2, 3, 4])).add_bias(b))),
        ("scale", |s| check(s, &[4], |_, x| Ok(x.scale(-1.7)))),
        ("add_scalar", |s| check(s, &[4], |_, x| Ok(x.add_scalar(0.3)))),
        ("silu", |s| check(s, &[3, 5], |_, x| Ok(x.scale(2.0).silu()))),
        ("sigmoid", |s| check(s, &[3, 5], |_, x| Ok(x.scale(2.0).sigmoid()))),
        ("sum", |s| check(s, &[3, 2], |_, x| Ok(x.square()?.sum()))),
        ("mean", |s| check(s, &[3, 2], |_, x| Ok(x.square()?.mean()))),
        ("frobenius_norm", |s| check(s, &[4, 4], |_, x| Ok(x.frobenius_norm()))),
        ("softmax_lastdim", |s| check(s, &[3, 6], |_, x| x.scale(2.0).softmax_lastdim())),
        ("layer_norm/x", |s| check(s, &[3, 6], |t, x| x.layer_norm(t.constant(other(s, &[6])), t.constant(other(s + 1, &[6])), 1e-5))),
        ("layer_norm/gain", |s| check(s, &[6], |t, g| t.constant(other(s, &[3, 6])).layer_norm(g, t.constant(other(s + 1, &[6])), 1e-5))),
        ("layer_norm/bias", |s| check(s, &[6], |t, b| t.constant(other(s, &[3, 6])).layer_norm(t.constant(other(s + 1, &[6])), b, 1e-5))),
        ("matmul/a", |s| check(s, &[3, 4], |t, a| a.matmul(t.constant(other(s, &[4, 5]))))),
        ("matmul/b", |s| check(s, &[4, 5], |t, b| t.constant(other(s, &[3, 4])).matmul(b))),
        ("matmul/batched", |s| check(s, &[2, 3, 4], |t, a| a.matmul(t.constant(other(s, &[2, 4, 2]))))),
        ("matmul/shared_b", |s| check(s, &[2, 4], |t, b| t.constant(other(s, &[2, 3, 2])).matmul(b))),
        ("matmul_nt/a", |s| check(s, &[2, 3, 4], |t, a| a.matmul_nt(t.constant(other(s, &[2, 5, 4]))))),
        ("matmul_nt/b", |s| check(s, &[2, 5, 4], |t, b| t.constant(other(s, &[2, 3, 4])).matmul_nt(b))),
        ("conv3d_causal/x", |s| {
            check(s, &[2, 4, 5, 5], |t, x| {
                x.conv3d_causal(t.constant(other(s, &[3, 2, 3, 3, 3])), t.constant(other(s + 1, &[3])), (2, 2, 1))
            })
        }),
        ("conv3d_causal/kernel", |s| {
            check(s, &[3, 2, 3, 3, 3], |t, k| {
                t.constant(other(s, &[2, 4, 5, 5])).conv3d_causal(k, t.constant(other(s + 1, &[3])), (1, 2, 2))
            })
        }),
        ("conv3d_causal/bias", |s| {
            check(s, &[3], |t, b| {
                t.constant(other(s, &[2, 4, 5, 5])).conv3d_causal(t.constant(other(s + 1, &[3, 2, 3, 3, 3])), b, (1, 1, 1))
            })
        }),
        ("reshape", |s| check(s, &[2, 6], |_, x| x.reshape(&[3, 4])?.softmax_lastdim())),
        ("permute", |s| check(s, &[2, 3, 4], |_, x| x.permute(&[2, 0, 1])?.softmax_lastdim())),
        ("narrow", |s| check(s, &[3, 5, 2], |_, x| x.narrow(1, 1, 3))),
        ("concat", |s| check(s, &[2, 3], |t, x| Var::concat(&[x, t.constant(other(s, &[2, 2])), x], 1))),
        ("upsample_nearest", |s| check(s, &[2, 2, 3, 2], |_, x| x.upsample_nearest([2, 2, 3]))),
    ]
}
