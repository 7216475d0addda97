//! Pixel/latent abstraction. The denoiser formally operates on encoded
//! tensors; the default codec is the identity (pixel-space diffusion), with
//! an affine rescaling variant kept pluggable.

use gradtape::Tensor;

pub trait LatentCodec {
    fn encode(&self, image: &Tensor) -> Tensor;
    fn decode(&self, latent: &Tensor) -> Tensor;
}

/// Pixel-space passthrough (the default).
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, image: &Tensor) -> Tensor {
        image.clone()
    }
    fn decode(&self, latent: &Tensor) -> Tensor {
        latent.clone()
    }
}

/// Affine map `[0,1] <-> [lo,hi]` (e.g. `[-1,1]` diffusion range).
pub struct ScaleShiftCodec {
    pub lo: f32,
    pub hi: f32,
}

impl LatentCodec for ScaleShiftCodec {
    fn encode(&self, image: &Tensor) -> Tensor {
        let (lo, hi) = (self.lo, self.hi);
        image.map(|v| lo + (hi - lo) * v)
    }
    fn decode(&self, latent: &Tensor) -> Tensor {
        let (lo, hi) = (self.lo, self.hi);
        latent.map(|v| (v - lo) / (hi - lo))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codecs_roundtrip() {
        let img = Tensor::from_fn(&[3, 2, 2], |i| i as f32 / 11.0);
        let id = IdentityCodec;
        assert_eq!(id.decode(&id.encode(&img)).data(), img.data());
        let ss = ScaleShiftCodec { lo: -1.0, hi: 1.0 };
        let back = ss.decode(&ss.encode(&img));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
