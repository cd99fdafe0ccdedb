//! Noise schedule, forward noising, denoiser training on moving sprites, and
//! the deterministic DDIM sampler.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::dit::{CaptionEmbedding, Dit};
use crate::error::{Error, Result};
use crate::nn::{accumulate, Adam, Binder};
use crate::tensor::Tensor;
use crate::vae::{cosine, TrainingLog, Vae};
use crate::video::{check_image, replicate_var, LatentVideo, VideoTensor};

/// Linear DDPM β schedule over timesteps `1..=t_train`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(t_train: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {t_train}")));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!("need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})")));
        }
        let betas: Vec<f64> = (0..t_train).map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_train - 1) as f64).collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_train);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_train() {
            return Err(Error::Usage(format!("timestep {t} outside 1..={}", self.t_train())));
        }
        Ok(())
    }

    /// `ᾱ_t` for `1 <= t <= T`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Descending sampler timesteps `⌈T·k/steps⌉` for `k = steps..1`.
    pub fn strided(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_train() {
            return Err(Error::Config(format!("sampling steps must be in 1..={}, got {steps}", self.t_train())));
        }
        let t = self.t_train();
        Ok((1..=steps).rev().map(|k| (t * k).div_ceil(steps)).collect())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t)?;
    x0.zip_map(noise, |x, n| ab.sqrt() * x + (1.0 - ab).sqrt() * n)
}

/// Differentiable [`q_sample`] in `x0`.
pub fn q_sample_var<'t>(x0: Var<'t>, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Var<'t>> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t)?;
    if x0.shape() != noise.shape() {
        return Err(Error::dim("q_sample", &x0.shape(), noise.shape()));
    }
    x0.scale(ab.sqrt()).add(x0.tape().constant(noise.map(|n| (1.0 - ab).sqrt() * n)))
}

/// Latent of the static video `rep(image, frames)` and the image-conditioning
/// latent: its first temporal slice (which by causality sees only the image)
/// replicated over all latent frames.
pub fn static_latents<'t>(vae: &Vae, p: &Binder<'t>, image: Var<'t>, frames: usize) -> Result<(Var<'t>, Var<'t>)> {
    let z = vae.encode_var(p, replicate_var(image, frames)?)?;
    let tl = z.shape()[0];
    let first = z.narrow(0, 0, 1)?;
    Ok((z, Var::concat(&vec![first; tl], 0)?))
}

fn first_slice_replicated(z: &Tensor) -> Result<Tensor> {
    let first = z.index_first(0)?;
    Tensor::stack(&vec![first; z.shape()[0]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpriteShape {
    Square,
    Disc,
}

impl SpriteShape {
    pub fn name(self) -> &'static str {
        match self {
            SpriteShape::Square => "square",
            SpriteShape::Disc => "disc",
        }
    }
}

pub const SPRITE_COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.2, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("magenta", [0.9, 0.15, 0.85]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

/// Static backdrop: `0.5 + amplitude · mean_k sin(2π(u_k·(y, x))/λ_k + φ_{k,c})`
/// with a unit direction `u_k`, wavelength `λ_k` and per-channel phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Backdrop {
    pub amplitude: f64,
    /// `(uy, ux, wavelength, [phase per channel])` per component.
    pub waves: Vec<(f64, f64, f64, [f64; 3])>,
}

impl Backdrop {
    pub fn flat() -> Self {
        Self { amplitude: 0.0, waves: Vec::new() }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let waves = (0..3)
            .map(|_| {
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let phase = [(); 3].map(|_| rng.gen_range(0.0..std::f64::consts::TAU));
                (theta.sin(), theta.cos(), rng.gen_range(10.0..20.0), phase)
            })
            .collect();
        Self { amplitude: 0.3, waves }
    }

    pub fn value(&self, c: usize, y: usize, x: usize) -> f64 {
        if self.waves.is_empty() {
            return 0.5;
        }
        let s: f64 =
            self.waves.iter().map(|&(uy, ux, len, ph)| (std::f64::consts::TAU * (uy * y as f64 + ux * x as f64) / len + ph[c]).sin()).sum();
        (0.5 + self.amplitude * s / self.waves.len() as f64).clamp(0.0, 1.0)
    }
}

/// Compass word for a nonzero velocity `(vy, vx)`; positive `vy` is down.
pub fn direction_word(vy: i32, vx: i32) -> &'static str {
    match (vy.signum(), vx.signum()) {
        (-1, 0) => "north",
        (1, 0) => "south",
        (0, 1) => "east",
        (0, -1) => "west",
        (-1, 1) => "northeast",
        (-1, -1) => "northwest",
        (1, 1) => "southeast",
        (1, -1) => "southwest",
        _ => "nowhere",
    }
}

/// One solid shape translating at constant integer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub color: &'static str,
    pub rgb: [f64; 3],
    pub shape: SpriteShape,
    pub size: usize,
    /// Top-left corner of the bounding box at frame 0, `(y, x)`.
    pub origin: (i32, i32),
    /// Pixels per frame, `(vy, vx)`.
    pub velocity: (i32, i32),
    pub backdrop: Backdrop,
}

impl Sprite {
    pub fn caption(&self) -> String {
        format!("{} {} moving {}", self.color, self.shape.name(), direction_word(self.velocity.0, self.velocity.1))
    }

    fn covers(&self, dy: i32, dx: i32) -> bool {
        let s = self.size as i32;
        match self.shape {
            SpriteShape::Square => (0..s).contains(&dy) && (0..s).contains(&dx),
            SpriteShape::Disc => {
                let c = (s as f64 - 1.0) / 2.0;
                let r = s as f64 / 2.0;
                (dy as f64 - c).powi(2) + (dx as f64 - c).powi(2) <= r * r
            }
        }
    }

    /// Frame `t` as `[3, h, w]`.
    pub fn render(&self, t: usize, h: usize, w: usize) -> Tensor {
        let mut data = vec![0.0; 3 * h * w];
        let (oy, ox) = self.position(t);
        for y in 0..h {
            for x in 0..w {
                let inside = self.covers(y as i32 - oy, x as i32 - ox);
                for c in 0..3 {
                    data[c * h * w + y * w + x] = if inside { self.rgb[c] } else { self.backdrop.value(c, y, x) };
                }
            }
        }
        Tensor::new(&[3, h, w], data).expect("positive extents")
    }

    pub fn position(&self, t: usize) -> (i32, i32) {
        (self.origin.0 + self.velocity.0 * t as i32, self.origin.1 + self.velocity.1 * t as i32)
    }

    /// Ground-truth displacement between frames `t` and `t + 1`: the velocity
    /// on the in-frame part of the bounding box at frame `t`, zero elsewhere.
    pub fn ground_truth_flow(&self, t: usize, h: usize, w: usize) -> Vec<(i32, i32)> {
        let (oy, ox) = self.position(t);
        let s = self.size as i32;
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as i32, (i % w) as i32);
                if (oy..oy + s).contains(&y) && (ox..ox + s).contains(&x) {
                    self.velocity
                } else {
                    (0, 0)
                }
            })
            .collect()
    }

    /// Mean ground-truth displacement length over the bounding box, averaged
    /// over consecutive frame pairs.
    pub fn bounding_box_flow(&self, frames: usize, h: usize, w: usize) -> f64 {
        let mut total = 0.0;
        for t in 0..frames.saturating_sub(1) {
            let field = self.ground_truth_flow(t, h, w);
            let inside: Vec<f64> = (0..h * w)
                .filter(|&i| {
                    let (oy, ox) = self.position(t);
                    let (y, x) = ((i / w) as i32, (i % w) as i32);
                    (oy..oy + self.size as i32).contains(&y) && (ox..ox + self.size as i32).contains(&x)
                })
                .map(|i| ((field[i].0.pow(2) + field[i].1.pow(2)) as f64).sqrt())
                .collect();
            total += inside.iter().sum::<f64>() / inside.len().max(1) as f64;
        }
        total / (frames.saturating_sub(1)).max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpriteClip {
    pub video: VideoTensor,
    pub caption: String,
    pub sprite: Sprite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpriteDataset {
    pub clips: Vec<SpriteClip>,
}

impl SpriteDataset {
    pub fn videos(&self) -> Vec<VideoTensor> {
        self.clips.iter().map(|c| c.video.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

fn start_range(v: i32, frames: usize, extent: usize, size: usize) -> (i32, i32) {
    let travel = v * (frames as i32 - 1);
    let lo = (-travel).max(0);
    let hi = extent as i32 - size as i32 - travel.max(0);
    if hi >= lo {
        (lo, hi)
    } else {
        let mid = (extent as i32 - size as i32 - travel) / 2;
        (mid, mid)
    }
}

/// Draws one random sprite for a `frames × h × w` clip.
pub fn random_sprite<R: Rng + ?Sized>(rng: &mut R, frames: usize, h: usize, w: usize) -> Sprite {
    let (color, rgb) = SPRITE_COLORS[rng.gen_range(0..SPRITE_COLORS.len())];
    let shape = if rng.gen_bool(0.5) { SpriteShape::Square } else { SpriteShape::Disc };
    let small = h.min(w);
    let size = rng.gen_range((small / 3).max(1)..=(small * 7 / 16).max(small / 3).max(1));
    let velocity = loop {
        let v = (rng.gen_range(-2..=2), rng.gen_range(-2..=2));
        if v != (0, 0) {
            break v;
        }
    };
    let (ylo, yhi) = start_range(velocity.0, frames, h, size);
    let (xlo, xhi) = start_range(velocity.1, frames, w, size);
    let origin = (rng.gen_range(ylo..=yhi), rng.gen_range(xlo..=xhi));
    Sprite { color, rgb, shape, size, origin, velocity, backdrop: Backdrop::random(rng) }
}

fn clip_from_sprite(sprite: Sprite, frames: usize, h: usize, w: usize) -> Result<SpriteClip> {
    let rendered: Vec<Tensor> = (0..frames).map(|t| sprite.render(t, h, w)).collect();
    Ok(SpriteClip { video: VideoTensor::new(Tensor::stack(&rendered)?)?, caption: sprite.caption(), sprite })
}

/// `n` seeded moving-sprite clips.
pub fn make_sprite_dataset(n: usize, frames: usize, h: usize, w: usize, seed: u64) -> Result<SpriteDataset> {
    if n == 0 || frames == 0 {
        return Err(Error::Usage("sprite dataset needs n >= 1 and frames >= 1".into()));
    }
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(Error::Config(format!("sprite frames {h}x{w} must be divisible by 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips = (0..n).map(|_| clip_from_sprite(random_sprite(&mut rng, frames, h, w), frames, h, w)).collect::<Result<_>>()?;
    Ok(SpriteDataset { clips })
}

/// Denoiser training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserTraining {
    pub epochs: usize,
    pub lr: f64,
    /// Samples whose gradients are summed per optimizer step.
    pub batch: usize,
    pub seed: u64,
}

/// Minimizes `‖ε − ε̂(x_t, t, c)‖²` (mean over elements) over the dataset with
/// seeded uniform timesteps and Gaussian noise.
pub fn train_denoiser(
    model: &mut Dit,
    vae: &Vae,
    data: &SpriteDataset,
    sched: &NoiseSchedule,
    opts: &DenoiserTraining,
) -> Result<TrainingLog> {
    if !vae.is_trained() {
        return Err(Error::Usage("denoiser training needs a trained autoencoder; run `train`".into()));
    }
    if data.is_empty() {
        return Err(Error::Usage("train_denoiser on an empty dataset".into()));
    }
    if opts.lr <= 0.0 || !opts.lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be > 0, got {}", opts.lr)));
    }
    if sched.t_train() != model.config.t_train {
        return Err(Error::Config(format!("schedule length {} differs from model t_train {}", sched.t_train(), model.config.t_train)));
    }
    let prepared = data
        .clips
        .iter()
        .map(|c| {
            let z = vae.encode(&c.video)?.latent;
            let cond = first_slice_replicated(&z)?;
            Ok((z, cond, model.caption(&c.caption)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Adam::new(opts.lr);
    let batch = opts.batch.max(1);
    let total_steps = (opts.epochs * prepared.len()).div_ceil(batch).max(1);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut pending: Vec<Tensor> = Vec::new();
    let mut in_batch = 0;
    let mut batch_loss = 0.0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (z, cond, emb) = &prepared[i];
            let t = rng.gen_range(1..=sched.t_train());
            let noise = Tensor::randn(z.shape(), 1.0, &mut rng);
            let xt = q_sample(z, t, &noise, sched)?;
            let tape = Tape::new();
            let p = Binder::trainable(&tape);
            let (eps, _) = model.forward(&p, p.constant(xt), p.constant(cond.clone()), emb, t)?;
            let loss = eps.sub(p.constant(noise))?.square()?.mean();
            tape.backward(loss)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NumericDomain { op: "train_denoiser", detail: format!("loss {value} at step {}", log.losses.len()) });
            }
            accumulate(&mut pending, p.gradients(&*model));
            batch_loss += value;
            in_batch += 1;
            if in_batch == batch {
                for g in &mut pending {
                    *g = g.map(|x| x / batch as f64);
                }
                let progress = log.losses.len() as f64 / total_steps as f64;
                opt.step_with_lr(model, &pending, opts.lr * cosine(progress));
                log.losses.push(batch_loss / batch as f64);
                pending.clear();
                in_batch = 0;
                batch_loss = 0.0;
            }
        }
    }
    model.mark_trained();
    Ok(log)
}

/// Deterministic DDIM (η = 0) image-to-video sampling.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &Dit,
    vae: &Vae,
    sched: &NoiseSchedule,
    image: &Tensor,
    caption: &str,
    frames: usize,
    steps: usize,
    seed: u64,
) -> Result<VideoTensor> {
    if !model.is_trained() || !vae.is_trained() {
        return Err(Error::Usage("sampling needs trained checkpoints; run `train`".into()));
    }
    check_image(image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let shape = vae.latent_shape(frames, h, w)?;
    let timesteps = sched.strided(steps)?;
    let cond = {
        let tape = Tape::new();
        let p = Binder::frozen(&tape);
        let (_, cond) = static_latents(vae, &p, tape.constant(image.clone()), frames)?;
        cond.value()
    };
    let emb: CaptionEmbedding = model.caption(caption);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&shape, 1.0, &mut rng);
    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
        let tape = Tape::new();
        let p = Binder::frozen(&tape);
        let (eps, _) = model.forward(&p, p.constant(x.clone()), p.constant(cond.clone()), &emb, t)?;
        let eps = eps.value();
        let (ab, ab_prev) = (sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?);
        x = x.zip_map(&eps, |xt, e| {
            let x0 = (xt - (1.0 - ab).sqrt() * e) / ab.sqrt();
            ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e
        })?;
        if !x.is_finite() {
            return Err(Error::NumericDomain { op: "sample", detail: format!("non-finite latent at timestep {t}") });
        }
    }
    vae.decode(&LatentVideo::new(x, frames)?)
}
