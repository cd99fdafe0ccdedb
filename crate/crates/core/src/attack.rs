//! Immunization losses and the sign-gradient PGD loop under an L∞ budget.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::diffusion::{q_sample_var, static_latents, NoiseSchedule};
use crate::dit::{cross_block_mask, AttentionRecord, CaptionEmbedding, Dit};
use crate::error::{Error, Result};
use crate::nn::Binder;
use crate::tensor::Tensor;
use crate::vae::Vae;
use crate::video::{check_image, replicate_var};

/// Tolerance on the budget invariant.
pub const BUDGET_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    Enc,
    Hs,
    Diff,
    AttnFull,
    AttnCross,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Enc, LossKind::Hs, LossKind::Diff, LossKind::AttnFull, LossKind::AttnCross];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Enc => "enc",
            LossKind::Hs => "hs",
            LossKind::Diff => "diff",
            LossKind::AttnFull => "attn_full",
            LossKind::AttnCross => "attn_cross",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// Accepts `attn_full` and `attn-full` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Usage(format!("unknown loss `{s}`; expected enc, hs, diff, attn-full or attn-cross")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub loss: LossKind,
    /// L∞ budget on the 0–255 scale.
    pub eps_pixels: u32,
    /// Signed step on the unit scale.
    pub step_size: f64,
    pub iterations: usize,
    /// Empty means the null prompt.
    pub caption: String,
    /// Monte Carlo `(t, noise)` draws per iteration.
    pub mc_samples: usize,
    pub seed: u64,
}

impl AttackConfig {
    /// Defaults: `α = ε/(255·10)`, 300 iterations, null caption, 2 draws, seed 0.
    pub fn new(loss: LossKind, eps_pixels: u32) -> Self {
        Self { loss, eps_pixels, step_size: default_step(eps_pixels), iterations: 300, caption: String::new(), mc_samples: 2, seed: 0 }
    }

    pub fn radius(&self) -> f64 {
        self.eps_pixels as f64 / 255.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps_pixels == 0 {
            return Err(Error::Config("eps_pixels must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn default_step(eps_pixels: u32) -> f64 {
    eps_pixels as f64 / (255.0 * 10.0)
}

/// One Monte Carlo sample of the diffusion expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: usize,
    pub noise: Tensor,
}

/// Trained models the losses run through.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub vae: &'a Vae,
    pub dit: &'a Dit,
    pub sched: &'a NoiseSchedule,
    pub frames: usize,
}

impl Pipeline<'_> {
    /// `m` seeded draws with `t ~ U{1..T}` and latent-shaped Gaussian noise.
    pub fn draws<R: Rng + ?Sized>(&self, m: usize, height: usize, width: usize, rng: &mut R) -> Result<Vec<Draw>> {
        let shape = self.vae.latent_shape(self.frames, height, width)?;
        Ok((0..m).map(|_| Draw { t: rng.gen_range(1..=self.sched.t_train()), noise: Tensor::randn(&shape, 1.0, rng) }).collect())
    }

    /// Runs the denoiser on each draw of the conditioning pathway of `x`.
    fn per_draw<'t, F>(&self, p: &Binder<'t>, x: Var<'t>, caption: &CaptionEmbedding, draws: &[Draw], mut f: F) -> Result<Var<'t>>
    where
        F: FnMut(Var<'t>, &AttentionRecord<'t>) -> Result<Var<'t>>,
    {
        if draws.is_empty() {
            return Err(Error::Usage("diffusion losses need at least one (t, noise) draw".into()));
        }
        let (z, cond) = static_latents(self.vae, p, x, self.frames)?;
        let mut total: Option<Var<'t>> = None;
        for d in draws {
            let xt = q_sample_var(z, d.t, &d.noise, self.sched)?;
            let (eps, rec) = self.dit.forward(p, xt, cond, caption, d.t)?;
            let v = f(eps, &rec)?;
            total = Some(match total {
                None => v,
                Some(acc) => acc.add(v)?,
            });
        }
        Ok(total.expect("non-empty").scale(1.0 / draws.len() as f64))
    }
}

fn layer_mean<'t>(norms: Vec<Var<'t>>) -> Result<Var<'t>> {
    let n = norms.len() as f64;
    let mut it = norms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Usage("no attention layers recorded".into()))?;
    for v in it {
        acc = acc.add(v)?;
    }
    Ok(acc.scale(1.0 / n))
}

/// `‖E(rep(X + δ))‖_F`; `x` is the perturbed image `[3, H, W]`.
pub fn loss_enc<'t>(p: &Binder<'t>, x: Var<'t>, vae: &Vae, frames: usize) -> Result<Var<'t>> {
    Ok(vae.encode_var(p, replicate_var(x, frames)?)?.frobenius_norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    Full,
    Cross,
}

/// Draw-mean of the layer-mean `‖A^(l)‖_F`, or of its video-to-text sub-block.
pub fn loss_attn<'t>(
    p: &Binder<'t>,
    x: Var<'t>,
    pipe: &Pipeline<'_>,
    caption: &CaptionEmbedding,
    mode: AttnMode,
    draws: &[Draw],
) -> Result<Var<'t>> {
    pipe.per_draw(p, x, caption, draws, |_, rec| {
        let blocks = match mode {
            AttnMode::Full => rec.layers.iter().map(|l| l.weights).collect(),
            AttnMode::Cross => cross_block_mask(rec)?,
        };
        layer_mean(blocks.into_iter().map(|a| a.frobenius_norm()).collect())
    })
}

/// Draw-mean of the layer-mean `‖H^(l)‖_F`.
pub fn loss_hs<'t>(p: &Binder<'t>, x: Var<'t>, pipe: &Pipeline<'_>, caption: &CaptionEmbedding, draws: &[Draw]) -> Result<Var<'t>> {
    pipe.per_draw(p, x, caption, draws, |_, rec| layer_mean(rec.layers.iter().map(|l| l.output.frobenius_norm()).collect()))
}

/// Draw-mean of `‖ε̂(x_t, t, c)‖_F`.
pub fn loss_diff<'t>(p: &Binder<'t>, x: Var<'t>, pipe: &Pipeline<'_>, caption: &CaptionEmbedding, draws: &[Draw]) -> Result<Var<'t>> {
    pipe.per_draw(p, x, caption, draws, |eps, _| Ok(eps.frobenius_norm()))
}

/// The loss selected by `kind`; `draws` is ignored by [`LossKind::Enc`].
pub fn attack_loss<'t>(
    kind: LossKind,
    p: &Binder<'t>,
    x: Var<'t>,
    pipe: &Pipeline<'_>,
    caption: &CaptionEmbedding,
    draws: &[Draw],
) -> Result<Var<'t>> {
    match kind {
        LossKind::Enc => loss_enc(p, x, pipe.vae, pipe.frames),
        LossKind::Hs => loss_hs(p, x, pipe, caption, draws),
        LossKind::Diff => loss_diff(p, x, pipe, caption, draws),
        LossKind::AttnFull => loss_attn(p, x, pipe, caption, AttnMode::Full, draws),
        LossKind::AttnCross => loss_attn(p, x, pipe, caption, AttnMode::Cross, draws),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImmunizedImage {
    pub original: Tensor,
    /// `adversarial − original`, on the 1/255 grid when `original` is.
    pub delta: Tensor,
    /// Quantized `X + δ` in `[0, 1]`.
    pub adversarial: Tensor,
    /// Loss estimate at each iteration, before its step.
    pub loss_log: Vec<f64>,
    /// `‖δ‖_∞` after each iteration's projection, unit scale.
    pub linf_log: Vec<f64>,
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Grid value for `x + d` truncated toward `x`, kept inside the budget and `[0, 1]`.
fn quantize_toward(x: f64, d: f64, radius: f64) -> f64 {
    let fudge = 1e-9;
    let target = (x + d) * 255.0;
    let k = if d >= 0.0 { (target + fudge).floor() } else { (target - fudge).ceil() };
    let lo = ((x - radius) * 255.0 - fudge).ceil().max(0.0);
    let hi = ((x + radius) * 255.0 + fudge).floor().min(255.0);
    k.clamp(lo, hi) / 255.0
}

/// Sign-gradient PGD from `δ = 0` minimizing the configured loss.
///
/// Each iteration draws `mc_samples` fresh `(t, noise)` samples, steps
/// `δ ← δ − α·sign(∇δ L)`, clips to the `ε/255` ball and re-derives
/// `δ = clamp(X + δ, 0, 1) − X`. The result is snapped to the 1/255 grid by
/// truncation toward `X`, which never grows `|δ|` on grid-aligned inputs.
pub fn pgd(image: &Tensor, config: &AttackConfig, pipe: &Pipeline<'_>) -> Result<ImmunizedImage> {
    config.validate()?;
    check_image(image)?;
    if !pipe.vae.is_trained() || (config.loss != LossKind::Enc && !pipe.dit.is_trained()) {
        return Err(Error::Usage("attack needs trained checkpoints; run `train`".into()));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let radius = config.radius();
    let alpha = config.step_size;
    let caption = pipe.dit.caption(&config.caption);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut delta = Tensor::zeros(image.shape());
    let mut loss_log = Vec::with_capacity(config.iterations);
    let mut linf_log = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let draws = pipe.draws(config.mc_samples, h, w, &mut rng)?;
        let tape = Tape::new();
        let p = Binder::frozen(&tape);
        let d = tape.leaf(delta.clone());
        let x = p.constant(image.clone()).add(d)?;
        let loss = attack_loss(config.loss, &p, x, pipe, &caption, &draws)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, value });
        }
        loss_log.push(value);
        tape.backward(loss)?;
        let g = d.grad().unwrap_or_else(|| Tensor::zeros(image.shape()));
        let stepped = delta.zip_map(&g, |dv, gv| (dv - alpha * sign(gv)).clamp(-radius, radius))?;
        delta = image.zip_map(&stepped, |x, dv| (x + dv).clamp(0.0, 1.0) - x)?;
        let linf = delta.max_abs();
        let in_range = image.data().iter().zip(delta.data()).all(|(x, dv)| (0.0..=1.0).contains(&(x + dv)));
        if linf > radius + BUDGET_SLACK || !in_range {
            return Err(Error::Domain(format!("budget violated at PGD iteration {iteration}: |δ|∞ = {linf}, radius {radius}")));
        }
        linf_log.push(linf);
    }
    let adversarial = image.zip_map(&delta, |x, dv| quantize_toward(x, dv, radius))?;
    let delta = adversarial.zip_map(image, |a, x| a - x)?;
    Ok(ImmunizedImage { original: image.clone(), delta, adversarial, loss_log, linf_log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert_eq!("attn-cross".parse::<LossKind>().unwrap(), LossKind::AttnCross);
        assert!("lpips".parse::<LossKind>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = AttackConfig::new(LossKind::AttnFull, 16);
        assert!((c.step_size - 16.0 / 2550.0).abs() < 1e-18);
        c.validate().unwrap();
        c.iterations = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = AttackConfig::new(LossKind::Enc, 0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn quantization_truncates_toward_origin() {
        let x = 128.0 / 255.0;
        let r = 16.0 / 255.0;
        assert_eq!(quantize_toward(x, 1.6 / 255.0, r), 129.0 / 255.0);
        assert_eq!(quantize_toward(x, -1.6 / 255.0, r), 127.0 / 255.0);
        assert_eq!(quantize_toward(x, 0.4 / 255.0, r), x);
        assert_eq!(quantize_toward(x, 16.0 / 255.0, r), 144.0 / 255.0);
        assert_eq!(quantize_toward(1.0, 0.0, r), 1.0);
        // Off-grid origin still lands inside the ball.
        let q = quantize_toward(0.5, 16.0 / 255.0, r);
        assert!((q - 0.5).abs() <= r + BUDGET_SLACK);
    }
}
