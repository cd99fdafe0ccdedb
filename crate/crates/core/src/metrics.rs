//! Motion and fidelity metrics: SSIM, temporal SSIM, block-matching flow and
//! perturbation visibility.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vae::Vae;
use crate::video::{replicate_image, VideoTensor, CHANNELS};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub const FLOW_PATCH_RADIUS: usize = 2;
pub const FLOW_SEARCH_RADIUS: i32 = 3;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn check_frames(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    if a.rank() != 3 || a.shape()[0] != CHANNELS {
        return Err(Error::dim(op, a.shape(), &[CHANNELS, 0, 0]));
    }
    Ok(())
}

/// Window start offsets along an axis of length `n`.
fn window_starts(n: usize, win: usize) -> impl Iterator<Item = usize> {
    (0..=n - win).step_by(SSIM_STRIDE)
}

/// Mean SSIM over uniform 8×8 windows at stride 4, averaged over channels.
/// Frames smaller than the window use a single window covering the frame.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_frames("ssim", a, b)?;
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let (mut sum, mut count) = (0.0, 0usize);
        for y0 in window_starts(h, wh) {
            for x0 in window_starts(w, ww) {
                let px = |p: &[f64], i: usize| p[(y0 + i / ww) * w + x0 + i % ww];
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..wh * ww {
                    ma += px(pa, i);
                    mb += px(pb, i);
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..wh * ww {
                    let (da, db) = (px(pa, i) - ma, px(pb, i) - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
                va /= n;
                vb /= n;
                cov /= n;
                sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / c as f64)
}

fn require_pairs(video: &VideoTensor, op: &str) -> Result<()> {
    if video.frame_count() < 2 {
        return Err(Error::Usage(format!("{op} needs at least 2 frames")));
    }
    Ok(())
}

/// `1 − ssim` for each consecutive frame pair.
pub fn frame_pair_ssim_drop(video: &VideoTensor) -> Result<Vec<f64>> {
    require_pairs(video, "temporal_ssim")?;
    (1..video.frame_count()).map(|t| Ok(1.0 - ssim(&video.frame(t - 1)?, &video.frame(t)?)?)).collect()
}

/// Mean over consecutive frame pairs of `1 − ssim`; zero for a static video.
pub fn temporal_ssim(video: &VideoTensor) -> Result<f64> {
    let d = frame_pair_ssim_drop(video)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Integer displacement field between two frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    /// Row-major `(dy, dx)` per pixel, bounded by the search radius.
    pub vectors: Vec<(i32, i32)>,
}

impl FlowField {
    pub fn at(&self, y: usize, x: usize) -> (i32, i32) {
        self.vectors[y * self.width + x]
    }

    /// Mean Euclidean displacement over all pixels.
    pub fn mean_magnitude(&self) -> f64 {
        self.vectors.iter().map(|&(dy, dx)| ((dy * dy + dx * dx) as f64).sqrt()).sum::<f64>() / self.vectors.len() as f64
    }
}

fn luma(frame: &Tensor) -> Vec<f64> {
    let hw = frame.shape()[1] * frame.shape()[2];
    let d = frame.data();
    (0..hw).map(|i| LUMA[0] * d[i] + LUMA[1] * d[hw + i] + LUMA[2] * d[2 * hw + i]).collect()
}

/// Search candidates ordered by `(dy² + dx², dy, dx)`, so a strict `<`
/// scan realizes the tie-break.
fn candidates() -> Vec<(i32, i32)> {
    let r = FLOW_SEARCH_RADIUS;
    let mut c: Vec<(i32, i32)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    c.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    c
}

/// Exhaustive block matching of 5×5 replicate-padded luma patches within a
/// radius-3 window, minimizing the sum of absolute differences.
pub fn optical_flow(a: &Tensor, b: &Tensor) -> Result<FlowField> {
    check_frames("optical_flow", a, b)?;
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let (la, lb) = (luma(a), luma(b));
    let pad = FLOW_PATCH_RADIUS as i32;
    let at = |img: &[f64], y: i32, x: i32| img[(y.clamp(0, h as i32 - 1) as usize) * w + x.clamp(0, w as i32 - 1) as usize];
    let cands = candidates();
    let mut vectors = Vec::with_capacity(h * w);
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            let mut best = (f64::INFINITY, (0, 0));
            for &(dy, dx) in &cands {
                let mut sad = 0.0;
                for py in -pad..=pad {
                    for px in -pad..=pad {
                        sad += (at(&la, y + py, x + px) - at(&lb, y + dy + py, x + dx + px)).abs();
                    }
                }
                if sad < best.0 {
                    best = (sad, (dy, dx));
                }
            }
            vectors.push(best.1);
        }
    }
    Ok(FlowField { height: h, width: w, vectors })
}

/// Mean flow magnitude of each consecutive frame pair.
pub fn frame_pair_flow(video: &VideoTensor) -> Result<Vec<f64>> {
    require_pairs(video, "flow_magnitude")?;
    (1..video.frame_count()).map(|t| Ok(optical_flow(&video.frame(t - 1)?, &video.frame(t)?)?.mean_magnitude())).collect()
}

/// Mean over consecutive pairs of the mean per-pixel displacement length.
pub fn flow_magnitude(video: &VideoTensor) -> Result<f64> {
    let f = frame_pair_flow(video)?;
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

/// How visible a perturbation is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visibility {
    /// `max |X − X_adv|` on the 0–255 scale.
    pub linf: f64,
    /// Root-mean-square pixel difference on the unit scale.
    pub l2: f64,
    /// `‖E(rep X) − E(rep X_adv)‖_F / ‖E(rep X)‖_F`; stands in for LPIPS.
    pub latent_distance: f64,
}

pub fn perturbation_visibility(x: &Tensor, x_adv: &Tensor, vae: &Vae, frames: usize) -> Result<Visibility> {
    check_frames("perturbation_visibility", x, x_adv)?;
    let diff = x.zip_map(x_adv, |a, b| a - b)?;
    let za = vae.encode(&replicate_image(x, frames)?)?.latent;
    let zb = vae.encode(&replicate_image(x_adv, frames)?)?.latent;
    let norm = za.frobenius();
    let dist = za.zip_map(&zb, |a, b| a - b)?.frobenius();
    Ok(Visibility {
        linf: diff.max_abs() * 255.0,
        l2: (diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64).sqrt(),
        latent_distance: if norm > 0.0 { dist / norm } else { dist },
    })
}

/// Per-video motion and fidelity numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub temporal_ssim: f64,
    pub flow_magnitude: f64,
    pub linf_delta: f64,
    pub l2_delta: f64,
    pub latent_distance: f64,
    pub per_frame_ssim_drop: Vec<f64>,
    pub per_frame_flow: Vec<f64>,
}

impl MetricsReport {
    pub fn new(video: &VideoTensor, visibility: Visibility) -> Result<Self> {
        let per_frame_ssim_drop = frame_pair_ssim_drop(video)?;
        let per_frame_flow = frame_pair_flow(video)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            temporal_ssim: mean(&per_frame_ssim_drop),
            flow_magnitude: mean(&per_frame_flow),
            linf_delta: visibility.linf,
            l2_delta: visibility.l2,
            latent_distance: visibility.latent_distance,
            per_frame_ssim_drop,
            per_frame_flow,
        })
    }
}
