mod common;

use common::loss_cases::{live_dit, loss_grad_error, Fixture, FRAMES};
use stillguard_core::attack::*;
use stillguard_core::dit::cross_block_mask;
use stillguard_core::nn::Binder;
use stillguard_core::{Dit, DitConfig, Error, Tape, Tensor, Vae, VaeConfig};

fn eval(kind: LossKind, fx: &Fixture, image: &Tensor, caption: &str) -> f64 {
    let tape = Tape::new();
    let p = Binder::frozen(&tape);
    let pipe = fx.pipeline();
    let emb = fx.dit.caption(caption);
    attack_loss(kind, &p, tape.constant(image.clone()), &pipe, &emb, &fx.draws).unwrap().item().unwrap()
}

#[test]
fn loss_gradients_match_finite_differences() {
    for kind in LossKind::ALL {
        for seed in 0..3 {
            let err = loss_grad_error(kind, seed);
            assert!(err < 1e-4, "{kind} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn losses_are_nonnegative_and_attention_positive() {
    for seed in 0..3 {
        let fx = Fixture::new(seed);
        for kind in LossKind::ALL {
            assert!(eval(kind, &fx, &fx.image, "a b") >= 0.0);
        }
        assert!(eval(LossKind::AttnFull, &fx, &fx.image, "") > 0.0);
        assert!(eval(LossKind::AttnCross, &fx, &fx.image, "") > 0.0);
    }
}

#[test]
fn cross_loss_never_exceeds_full_loss() {
    for seed in 0..5 {
        let fx = Fixture::new(seed);
        for caption in ["", "blue square moving north"] {
            let full = eval(LossKind::AttnFull, &fx, &fx.image, caption);
            let cross = eval(LossKind::AttnCross, &fx, &fx.image, caption);
            assert!(cross <= full, "seed {seed}: {cross} > {full}");
        }
    }
}

#[test]
fn full_attention_loss_is_at_least_one() {
    // Each softmax row has unit mass, so ‖row‖₂ ≥ 1/√N and ‖A‖_F ≥ √heads.
    let fx = Fixture::new(7);
    let v = eval(LossKind::AttnFull, &fx, &fx.image, "x");
    assert!(v >= 2f64.sqrt() - 1e-12, "{v}");
}

#[test]
fn diff_loss_of_zero_head_model_is_zero() {
    let mut fx = Fixture::new(1);
    fx.dit = Dit::new(DitConfig::default(), 3).unwrap();
    assert_eq!(eval(LossKind::Diff, &fx, &fx.image, "x"), 0.0);
}

#[test]
fn enc_loss_is_zero_only_for_zero_latent() {
    let fx = Fixture::new(2);
    assert!(eval(LossKind::Enc, &fx, &fx.image, "") > 0.0);
}

#[test]
fn empty_draws_are_a_usage_error() {
    let mut fx = Fixture::new(0);
    fx.draws.clear();
    let tape = Tape::new();
    let p = Binder::frozen(&tape);
    let pipe = fx.pipeline();
    let emb = fx.dit.caption("");
    for kind in [LossKind::Hs, LossKind::Diff, LossKind::AttnFull, LossKind::AttnCross] {
        let r = attack_loss(kind, &p, tape.constant(fx.image.clone()), &pipe, &emb, &[]);
        assert!(matches!(r, Err(Error::Usage(_))), "{kind}");
    }
}

#[test]
fn cross_block_of_record_is_restriction() {
    let fx = Fixture::new(4);
    let tape = Tape::new();
    let p = Binder::frozen(&tape);
    let (z, cond) = stillguard_core::diffusion::static_latents(&fx.vae, &p, tape.constant(fx.image.clone()), FRAMES).unwrap();
    let (_, rec) = fx.dit.forward(&p, z, cond, &fx.dit.caption("q"), 9).unwrap();
    for (sub, l) in cross_block_mask(&rec).unwrap().iter().zip(&rec.layers) {
        assert!(sub.value().frobenius() <= l.weights.value().frobenius());
    }
}

fn grid_image(seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = (0..3 * 16 * 16).map(|_| r.gen_range(0..=255u8) as f64 / 255.0).collect();
    Tensor::new(&[3, 16, 16], d).unwrap()
}

fn trained_vae(seed: u64) -> Vae {
    let named = Vae::new(VaeConfig::default(), seed).to_named().into_iter().collect();
    Vae::from_named(VaeConfig::default(), &named).unwrap()
}

#[test]
fn zero_iterations_are_rejected() {
    let fx = Fixture::new(0);
    let mut cfg = AttackConfig::new(LossKind::AttnFull, 4);
    cfg.iterations = 0;
    assert!(matches!(pgd(&fx.image, &cfg, &fx.pipeline()), Err(Error::Config(_))));
}

#[test]
fn one_iteration_moves_at_most_one_step() {
    let vae = trained_vae(0);
    let dit = live_dit(1);
    let sched = stillguard_core::NoiseSchedule::new(50, 1e-4, 0.0926).unwrap();
    let pipe = Pipeline { vae: &vae, dit: &dit, sched: &sched, frames: FRAMES };
    let img = grid_image(3);
    for (eps, kind) in [(16, LossKind::AttnFull), (2, LossKind::Enc), (4, LossKind::Diff)] {
        let mut cfg = AttackConfig::new(kind, eps);
        cfg.iterations = 1;
        let r = pgd(&img, &cfg, &pipe).unwrap();
        let bound = cfg.step_size.min(eps as f64 / 255.0);
        assert!(r.delta.max_abs() <= bound + 1e-12, "{kind}: {}", r.delta.max_abs());
        assert_eq!(r.loss_log.len(), 1);
    }
}

#[test]
fn pgd_respects_budget_and_grid() {
    let vae = trained_vae(2);
    let dit = live_dit(3);
    let sched = stillguard_core::NoiseSchedule::new(50, 1e-4, 0.0926).unwrap();
    let pipe = Pipeline { vae: &vae, dit: &dit, sched: &sched, frames: FRAMES };
    let img = grid_image(5);
    for kind in LossKind::ALL {
        let mut cfg = AttackConfig::new(kind, 2);
        cfg.iterations = 25;
        cfg.step_size = 1.0 / 255.0;
        let r = pgd(&img, &cfg, &pipe).unwrap();
        assert_eq!(r.linf_log.len(), 25);
        assert!(r.linf_log.iter().all(|&l| l <= 2.0 / 255.0 + BUDGET_SLACK));
        for (&a, &x) in r.adversarial.data().iter().zip(img.data()) {
            assert!((0.0..=1.0).contains(&a));
            assert!((a - x).abs() <= 2.0 / 255.0 + BUDGET_SLACK);
            assert_eq!((a * 255.0).round() / 255.0, a);
        }
    }
}

#[test]
fn pgd_is_deterministic_per_seed() {
    let vae = trained_vae(4);
    let dit = live_dit(5);
    let sched = stillguard_core::NoiseSchedule::new(50, 1e-4, 0.0926).unwrap();
    let pipe = Pipeline { vae: &vae, dit: &dit, sched: &sched, frames: FRAMES };
    let mut cfg = AttackConfig::new(LossKind::Hs, 8);
    cfg.iterations = 5;
    let a = pgd(&grid_image(1), &cfg, &pipe).unwrap();
    let b = pgd(&grid_image(1), &cfg, &pipe).unwrap();
    assert_eq!(a, b);
    cfg.seed = 1;
    assert_ne!(pgd(&grid_image(1), &cfg, &pipe).unwrap().loss_log, a.loss_log);
}

#[test]
fn non_finite_loss_aborts_with_iteration() {
    let named = Vae::new(VaeConfig::default(), 0)
        .to_named()
        .into_iter()
        .map(|(n, t)| if n == "vae.enc2.bias" { (n, t.map(|_| f64::INFINITY)) } else { (n, t) })
        .collect();
    let vae = Vae::from_named(VaeConfig::default(), &named).unwrap();
    let dit = live_dit(0);
    let sched = stillguard_core::NoiseSchedule::new(50, 1e-4, 0.0926).unwrap();
    let pipe = Pipeline { vae: &vae, dit: &dit, sched: &sched, frames: FRAMES };
    let cfg = AttackConfig::new(LossKind::Enc, 4);
    match pgd(&grid_image(0), &cfg, &pipe) {
        Err(Error::NonFiniteLoss { iteration, .. }) => assert_eq!(iteration, 0),
        other => panic!("expected non-finite loss error, got {other:?}"),
    }
}

#[test]
fn untrained_models_are_refused() {
    let vae = Vae::new(VaeConfig::default(), 0);
    let dit = Dit::new(DitConfig::default(), 0).unwrap();
    let sched = stillguard_core::NoiseSchedule::new(50, 1e-4, 0.0926).unwrap();
    let pipe = Pipeline { vae: &vae, dit: &dit, sched: &sched, frames: FRAMES };
    let cfg = AttackConfig::new(LossKind::AttnFull, 4);
    assert!(matches!(pgd(&grid_image(0), &cfg, &pipe), Err(Error::Usage(_))));
}
