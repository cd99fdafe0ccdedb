//! Finite-difference gradient cases for the five immunization losses on small
//! randomly initialized models.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stillguard_core::attack::{attack_loss, Draw, LossKind, Pipeline};
use stillguard_core::nn::Binder;
use stillguard_core::{grad_check_coords, Dit, DitConfig, NoiseSchedule, Tensor, Vae, VaeConfig};

pub const FRAMES: usize = 4;
pub const SIDE: usize = 16;
const COORDS: usize = 40;

/// A denoiser whose zero-initialized output head is replaced by a random one.
pub fn live_dit(seed: u64) -> Dit {
    let base = Dit::new(DitConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let named: BTreeMap<String, Tensor> = base
        .to_named()
        .into_iter()
        .map(|(n, t)| {
            if n.starts_with("dit.head") {
                let r = Tensor::randn(t.shape(), 0.2, &mut rng);
                (n, r)
            } else {
                (n, t)
            }
        })
        .collect();
    Dit::from_named(DitConfig::default(), &named).unwrap()
}

pub struct Fixture {
    pub vae: Vae,
    pub dit: Dit,
    pub sched: NoiseSchedule,
    pub image: Tensor,
    pub draws: Vec<Draw>,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let vae = Vae::new(VaeConfig::default(), seed);
        let dit = live_dit(seed + 1);
        let sched = NoiseSchedule::new(50, 1e-4, 0.0926).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let image = Tensor::rand_uniform(&[3, SIDE, SIDE], 0.1, 0.9, &mut rng);
        let draws = {
            let pipe = Pipeline { vae: &vae, dit: &dit, sched: &sched, frames: FRAMES };
            pipe.draws(2, SIDE, SIDE, &mut rng).unwrap()
        };
        Self { vae, dit, sched, image, draws }
    }

    pub fn pipeline(&self) -> Pipeline<'_> {
        Pipeline { vae: &self.vae, dit: &self.dit, sched: &self.sched, frames: FRAMES }
    }
}

/// Finite-difference step for the losses: smaller steps are dominated by
/// roundoff at these loss scales.
pub const LOSS_GRAD_STEP: f64 = 1e-4;

/// Worst relative error of the gradient of `kind` with respect to the image.
pub fn loss_grad_error(kind: LossKind, seed: u64) -> f64 {
    loss_grad_error_at(kind, seed, LOSS_GRAD_STEP)
}

/// [`loss_grad_error`] with an explicit step `h`.
pub fn loss_grad_error_at(kind: LossKind, seed: u64, h: f64) -> f64 {
    let fx = Fixture::new(seed);
    let pipe = fx.pipeline();
    let caption = fx.dit.caption("red disc moving east");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let coords = sample(&mut rng, fx.image.len(), COORDS).into_vec();
    grad_check_coords(
        |tape, x| {
            let p = Binder::frozen(tape);
            attack_loss(kind, &p, x, &pipe, &caption, &fx.draws)
        },
        &fx.image,
        h,
        &coords,
    )
    .unwrap()
}
