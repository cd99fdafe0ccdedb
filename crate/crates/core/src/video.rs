//! Pixel-space and latent-space video containers.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on the unit pixel range.
pub const PIXEL_SLACK: f64 = 1e-12;

pub const CHANNELS: usize = 3;

/// Frame sequence `[T, C, H, W]` with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: Tensor,
}

impl VideoTensor {
    pub fn new(frames: Tensor) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != CHANNELS {
            return Err(Error::dim("VideoTensor", s, &[0, CHANNELS, 0, 0]));
        }
        check_unit_range(&frames)?;
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Frame `t` as `[C, H, W]`.
    pub fn frame(&self, t: usize) -> Result<Tensor> {
        self.frames.index_first(t)
    }
}

pub(crate) fn check_unit_range(t: &Tensor) -> Result<()> {
    match t.data().iter().position(|&v| !(-PIXEL_SLACK..=1.0 + PIXEL_SLACK).contains(&v)) {
        Some(i) => Err(Error::Domain(format!("pixel value {} at flat index {i} is outside [0, 1]", t.data()[i]))),
        None => Ok(()),
    }
}

/// Checks an image is `[C, H, W]` with values in `[0, 1]`.
pub fn check_image(image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != CHANNELS {
        return Err(Error::dim("image", image.shape(), &[CHANNELS, 0, 0]));
    }
    check_unit_range(image)
}

/// A static video: `frames` copies of `image`.
pub fn replicate_image(image: &Tensor, frames: usize) -> Result<VideoTensor> {
    if frames == 0 {
        return Err(Error::Usage("replicate_image needs at least one frame".into()));
    }
    check_image(image)?;
    let copies = vec![image.clone(); frames];
    VideoTensor::new(Tensor::stack(&copies)?)
}

/// Differentiable [`replicate_image`]: `[C, H, W]` to `[T, C, H, W]`.
pub fn replicate_var<'t>(image: Var<'t>, frames: usize) -> Result<Var<'t>> {
    if frames == 0 {
        return Err(Error::Usage("replicate_image needs at least one frame".into()));
    }
    let mut shape = vec![1];
    shape.extend(image.shape());
    let one = image.reshape(&shape)?;
    Var::concat(&vec![one; frames], 0)
}

/// Latent video `[T', C_lat, H', W']` plus the pixel frame count it decodes to.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub latent: Tensor,
    pub frame_count: usize,
}

impl LatentVideo {
    pub fn new(latent: Tensor, frame_count: usize) -> Result<Self> {
        if latent.rank() != 4 || latent.shape()[0] != frame_count.div_ceil(2) {
            return Err(Error::dim("LatentVideo", latent.shape(), &[frame_count.div_ceil(2)]));
        }
        Ok(Self { latent, frame_count })
    }

    pub fn shape(&self) -> &[usize] {
        self.latent.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;

    fn image(seed: u64) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[3, 4, 4], 0.0, 1.0, &mut r)
    }

    #[test]
    fn single_frame_replica_equals_image() {
        let img = image(0);
        let v = replicate_image(&img, 1).unwrap();
        assert_eq!(v.frame_count(), 1);
        assert_eq!(v.frame(0).unwrap(), img);
    }

    #[test]
    fn zero_image_gives_zero_video() {
        let v = replicate_image(&Tensor::zeros(&[3, 8, 8]), 8).unwrap();
        assert_eq!(v.frame_count(), 8);
        assert!(v.frames().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn every_frame_is_bitwise_the_first() {
        let v = replicate_image(&image(3), 5).unwrap();
        let first = v.frame(0).unwrap();
        for t in 1..5 {
            assert_eq!(v.frame(t).unwrap(), first);
        }
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        let mut img = image(1);
        img.data_mut()[5] = 1.5;
        assert!(matches!(replicate_image(&img, 2), Err(Error::Domain(_))));
        assert!(matches!(replicate_image(&image(1), 0), Err(Error::Usage(_))));
    }

    #[test]
    fn replicate_var_matches_value_version_and_sums_gradients() {
        let img = image(2);
        let tape = Tape::new();
        let x = tape.leaf(img.clone());
        let v = replicate_var(x, 4).unwrap();
        assert_eq!(&v.value(), replicate_image(&img, 4).unwrap().frames());
        v.sum().backward().unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&g| g == 4.0));
    }
}
