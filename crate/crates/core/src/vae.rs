//! Deterministic 3D causal convolutional autoencoder.
//!
//! Encoder: three causal convolutions (3→8→16→C_lat channels) with SiLU in
//! between, strides (1,2,2) and (2,2,2) giving 2× temporal and 4× spatial
//! compression. Decoder: causal convolutions interleaved with nearest
//! upsampling, ending in a sigmoid so decoded pixels stay in `(0, 1)`.
//!
//! Latents are multiplied by `latent_scale` after encoding (and divided before
//! decoding). It is fitted after training so latents have unit variance on the
//! training set.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, join, Adam, Binder, Conv3d, Module};
use crate::tensor::Tensor;
use crate::video::{LatentVideo, VideoTensor, CHANNELS};

pub const TEMPORAL_FACTOR: usize = 2;
pub const SPATIAL_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub latent_channels: usize,
    pub encoder_widths: [usize; 2],
    pub decoder_widths: [usize; 3],
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { latent_channels: 4, encoder_widths: [8, 16], decoder_widths: [32, 16, 8] }
    }
}

#[derive(Debug, Clone)]
pub struct Vae {
    pub config: VaeConfig,
    encoder: [Conv3d; 3],
    decoder: [Conv3d; 4],
    latent_scale: f64,
    trained: bool,
}

/// Per-step losses of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub losses: Vec<f64>,
}

impl TrainingLog {
    /// Means over consecutive non-overlapping windows of `w` steps.
    pub fn smoothed(&self, w: usize) -> Vec<f64> {
        self.losses.chunks_exact(w.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }

    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [e1, e2] = config.encoder_widths;
        let [d1, d2, d3] = config.decoder_widths;
        let cl = config.latent_channels;
        let k = [3, 3, 3];
        let encoder = [
            Conv3d::new(CHANNELS, e1, k, (1, 2, 2), &mut rng),
            Conv3d::new(e1, e2, k, (2, 2, 2), &mut rng),
            Conv3d::new(e2, cl, k, (1, 1, 1), &mut rng),
        ];
        let decoder = [
            Conv3d::new(cl, d1, k, (1, 1, 1), &mut rng),
            Conv3d::new(d1, d2, k, (1, 1, 1), &mut rng),
            Conv3d::new(d2, d3, k, (1, 1, 1), &mut rng),
            Conv3d::new(d3, CHANNELS, k, (1, 1, 1), &mut rng),
        ];
        Self { config, encoder, decoder, latent_scale: 1.0, trained: false }
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    /// Whether the parameters come from training or a checkpoint.
    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Latent shape `[T', C_lat, H', W']` for a `frames × H × W` video.
    pub fn latent_shape(&self, frames: usize, height: usize, width: usize) -> Result<[usize; 4]> {
        if !height.is_multiple_of(SPATIAL_FACTOR) || !width.is_multiple_of(SPATIAL_FACTOR) || frames == 0 {
            return Err(Error::Config(format!(
                "video extents {frames}x{height}x{width} incompatible with {SPATIAL_FACTOR}x spatial compression"
            )));
        }
        Ok([frames.div_ceil(TEMPORAL_FACTOR), self.config.latent_channels, height / SPATIAL_FACTOR, width / SPATIAL_FACTOR])
    }

    /// Differentiable encoder: `[T, C, H, W]` pixels to `[T', C_lat, H', W']`.
    pub fn encode_var<'t>(&self, p: &Binder<'t>, video: Var<'t>) -> Result<Var<'t>> {
        let s = video.shape();
        if s.len() != 4 || s[1] != CHANNELS {
            return Err(Error::dim("encode", &s, &[0, CHANNELS, 0, 0]));
        }
        self.latent_shape(s[0], s[2], s[3])?;
        let mut h = video.permute(&[1, 0, 2, 3])?;
        for (i, conv) in self.encoder.iter().enumerate() {
            h = conv.forward(p, h)?;
            if i + 1 < self.encoder.len() {
                h = h.silu();
            }
        }
        h.scale(self.latent_scale).permute(&[1, 0, 2, 3])
    }

    /// Differentiable decoder producing `frames` frames.
    pub fn decode_var<'t>(&self, p: &Binder<'t>, latent: Var<'t>, frames: usize) -> Result<Var<'t>> {
        let s = latent.shape();
        if s.len() != 4 || s[1] != self.config.latent_channels || s[0] != frames.div_ceil(TEMPORAL_FACTOR) {
            return Err(Error::dim("decode", &s, &[frames.div_ceil(TEMPORAL_FACTOR), self.config.latent_channels]));
        }
        let [c0, c1, c2, c3] = &self.decoder;
        let z = latent.scale(1.0 / self.latent_scale).permute(&[1, 0, 2, 3])?;
        let h = c0.forward(p, z)?.silu();
        let h = c1.forward(p, h)?.silu().upsample_nearest([2, 2, 2])?;
        let h = c2.forward(p, h)?.silu().upsample_nearest([1, 2, 2])?;
        let h = c3.forward(p, h)?.sigmoid();
        h.narrow(1, 0, frames)?.permute(&[1, 0, 2, 3])
    }

    pub fn encode(&self, video: &VideoTensor) -> Result<LatentVideo> {
        let tape = Tape::new();
        let p = Binder::frozen(&tape);
        let z = self.encode_var(&p, tape.constant(video.frames().clone()))?;
        LatentVideo::new(z.value(), video.frame_count())
    }

    pub fn decode(&self, latent: &LatentVideo) -> Result<VideoTensor> {
        let tape = Tape::new();
        let p = Binder::frozen(&tape);
        let v = self.decode_var(&p, tape.constant(latent.latent.clone()), latent.frame_count)?;
        VideoTensor::new(v.value())
    }

    fn reconstruction_loss<'t>(&self, p: &Binder<'t>, video: &VideoTensor) -> Result<Var<'t>> {
        let x = p.constant(video.frames().clone());
        let z = self.encode_var(p, x)?;
        let y = self.decode_var(p, z, video.frame_count())?;
        Ok(y.sub(x)?.square()?.mean())
    }

    /// Fits the autoencoder to `dataset` by minimizing mean squared
    /// reconstruction error with Adam, one video per step, in a seeded
    /// shuffled order. Fits `latent_scale` afterwards.
    pub fn train_autoencoder(&mut self, dataset: &[VideoTensor], epochs: usize, lr: f64, seed: u64) -> Result<TrainingLog> {
        if dataset.is_empty() {
            return Err(Error::Usage("train_autoencoder on an empty dataset".into()));
        }
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        self.latent_scale = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = Adam::new(lr);
        let total = (epochs * dataset.len()).max(1);
        let mut log = TrainingLog::default();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let tape = Tape::new();
                let p = Binder::trainable(&tape);
                let loss = self.reconstruction_loss(&p, &dataset[i])?;
                tape.backward(loss)?;
                log.losses.push(loss.item()?);
                let grads = p.gradients(&*self);
                let progress = log.losses.len() as f64 / total as f64;
                opt.step_with_lr(self, &grads, lr * cosine(progress));
            }
        }
        self.fit_latent_scale(dataset)?;
        self.trained = true;
        Ok(log)
    }

    fn fit_latent_scale(&mut self, dataset: &[VideoTensor]) -> Result<()> {
        self.latent_scale = 1.0;
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
        for v in dataset {
            let z = self.encode(v)?;
            for &x in z.latent.data() {
                sum += x;
                sq += x * x;
                n += 1.0;
            }
        }
        let var = sq / n - (sum / n).powi(2);
        if var > 0.0 && var.is_finite() {
            self.latent_scale = 1.0 / var.sqrt();
        }
        Ok(())
    }

    /// Mean absolute per-pixel reconstruction error.
    pub fn reconstruction_mae(&self, video: &VideoTensor) -> Result<f64> {
        let rec = self.decode(&self.encode(video)?)?;
        Ok(rec.frames().zip_map(video.frames(), |a, b| (a - b).abs())?.mean())
    }

    /// Named parameters for checkpointing, including `latent_scale`.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut out = nn::named_tensors(self, "vae");
        out.push(("vae.latent_scale".into(), Tensor::scalar(self.latent_scale)));
        out
    }

    /// Rebuilds a trained autoencoder from checkpoint tensors.
    pub fn from_named(config: VaeConfig, named: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut vae = Vae::new(config, 0);
        nn::load_named(&mut vae, "vae", named)?;
        vae.latent_scale =
            named.get("vae.latent_scale").ok_or_else(|| Error::Usage("checkpoint lacks `vae.latent_scale`".into()))?.item()?;
        vae.trained = true;
        Ok(vae)
    }
}

/// Cosine decay from 1 to 0.1 over training progress in `[0, 1]`.
pub(crate) fn cosine(progress: f64) -> f64 {
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress.clamp(0.0, 1.0)).cos())
}

impl Module for Vae {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.encoder.iter().enumerate() {
            c.visit(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, c) in self.decoder.iter().enumerate() {
            c.visit(&join(prefix, &format!("dec{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.encoder.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, c) in self.decoder.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("dec{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check_coords;
    use crate::video::replicate_image;

    fn random_video(frames: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::new(Tensor::rand_uniform(&[frames, 3, h, w], 0.0, 1.0, &mut r)).unwrap()
    }

    #[test]
    fn latent_extents_follow_compression_factors() {
        let vae = Vae::new(VaeConfig::default(), 0);
        let z = vae.encode(&random_video(8, 32, 32, 0)).unwrap();
        assert_eq!(z.shape(), &[4, 4, 8, 8]);
        for (t, expected) in [(1, 1), (2, 1), (3, 2), (5, 3)] {
            let z = vae.encode(&random_video(t, 8, 12, 1)).unwrap();
            assert_eq!(z.shape(), &[expected, 4, 2, 3]);
        }
    }

    #[test]
    fn indivisible_extents_are_a_configuration_error() {
        let vae = Vae::new(VaeConfig::default(), 0);
        let v = random_video(2, 6, 8, 0);
        assert!(matches!(vae.encode(&v), Err(Error::Config(_))));
    }

    #[test]
    fn decode_inverts_encode_shape_and_stays_in_range() {
        let vae = Vae::new(VaeConfig::default(), 3);
        for t in [1, 4, 7] {
            let v = random_video(t, 16, 8, 2);
            let rec = vae.decode(&vae.encode(&v).unwrap()).unwrap();
            assert_eq!(rec.frames().shape(), v.frames().shape());
        }
        let zero = LatentVideo::new(Tensor::zeros(&[2, 4, 2, 2]), 4).unwrap();
        let out = vae.decode(&zero).unwrap();
        assert!(out.frames().data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn decode_rejects_mismatched_latent() {
        let vae = Vae::new(VaeConfig::default(), 3);
        let bad = LatentVideo { latent: Tensor::zeros(&[2, 3, 2, 2]), frame_count: 4 };
        assert!(matches!(vae.decode(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn different_seeds_give_different_latents() {
        let v = random_video(2, 8, 8, 9);
        let a = Vae::new(VaeConfig::default(), 1).encode(&v).unwrap();
        let b = Vae::new(VaeConfig::default(), 2).encode(&v).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encoder_norm_gradient_passes_grad_check() {
        let vae = Vae::new(VaeConfig::default(), 4);
        let img = random_video(1, 8, 8, 5).frame(0).unwrap();
        let coords: Vec<usize> = (0..img.len()).step_by(3).collect();
        let err = grad_check_coords(
            |tape, x| {
                let p = Binder::frozen(tape);
                let v = crate::video::replicate_var(x, 4)?;
                Ok(vae.encode_var(&p, v)?.frobenius_norm())
            },
            &img,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn encoder_is_causal_in_time() {
        let vae = Vae::new(VaeConfig::default(), 6);
        let base = random_video(8, 8, 8, 7);
        let z0 = vae.encode(&base).unwrap();
        for t in 0..8 {
            let mut frames = base.frames().clone();
            let per = frames.len() / 8;
            for v in &mut frames.data_mut()[t * per..(t + 1) * per] {
                *v = 1.0 - *v;
            }
            let z = vae.encode(&VideoTensor::new(frames).unwrap()).unwrap();
            for tau in 0..4 {
                let same = z.latent.index_first(tau).unwrap() == z0.latent.index_first(tau).unwrap();
                if tau < t / 2 {
                    assert!(same, "frame {t} leaked into latent slice {tau}");
                }
            }
        }
    }

    #[test]
    fn static_content_stays_static() {
        let vae = Vae::new(VaeConfig::default(), 8);
        let img = random_video(1, 8, 8, 9).frame(0).unwrap();
        let z = vae.encode(&replicate_image(&img, 8).unwrap()).unwrap();
        let first = z.latent.index_first(0).unwrap();
        for tau in 1..4 {
            assert_eq!(z.latent.index_first(tau).unwrap(), first);
        }
        let v = vae.decode(&z).unwrap();
        for t in 1..8 {
            assert_eq!(v.frame(t).unwrap(), v.frame(0).unwrap());
        }
    }

    #[test]
    fn one_epoch_on_one_video_reduces_loss_and_is_deterministic() {
        let video = replicate_image(&random_video(1, 8, 8, 8).frame(0).unwrap(), 4).unwrap();
        let run = || {
            let mut vae = Vae::new(VaeConfig::default(), 10);
            let log = vae.train_autoencoder(std::slice::from_ref(&video), 60, 3e-3, 0).unwrap();
            (vae, log)
        };
        let (vae, log) = run();
        let (_, again) = run();
        assert_eq!(log, again);
        assert!(log.last().unwrap() < log.first().unwrap());
        let smooth = log.smoothed(10);
        assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "{smooth:?}");
        assert!(vae.is_trained());
    }

    #[test]
    fn empty_dataset_is_a_usage_error() {
        let mut vae = Vae::new(VaeConfig::default(), 0);
        assert!(matches!(vae.train_autoencoder(&[], 1, 1e-3, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn named_round_trip_restores_the_model() {
        let vae = Vae::new(VaeConfig::default(), 11);
        let named: BTreeMap<_, _> = vae.to_named().into_iter().collect();
        let back = Vae::from_named(VaeConfig::default(), &named).unwrap();
        let v = random_video(2, 8, 8, 1);
        assert_eq!(back.encode(&v).unwrap(), vae.encode(&v).unwrap());
        assert!(back.is_trained());
    }
}
