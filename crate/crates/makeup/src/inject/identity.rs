//! Identity conditioning branch: a conv encoder over the concatenated
//! source image and structure render, feeding zero-initialized residuals
//! into the UNet encoder levels. At init the branch output is exactly zero,
//! so plugging it in cannot perturb the frozen backbone.

use gradtape::nn::{Conv2d, GroupNorm, ParamStore, SplitMix64};
use gradtape::{Tape, Tensor, Var};

use crate::denoiser::UnetConfig;
use crate::error::{Error, Result};
use crate::imageio::{image_dims, mask_dims};

pub struct IdentityBranch {
    stem: Conv2d,
    gn0: GroupNorm,
    conv0: Conv2d,
    port0: Conv2d,
    down1: Conv2d,
    gn1: GroupNorm,
    conv1: Conv2d,
    port1: Conv2d,
    down2: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
    port2: Conv2d,
    /// Which input channels are active: (pixels, structure). Ablations zero
    /// the disabled group instead of changing the architecture.
    pub use_pixels: bool,
    pub use_structure: bool,
}

impl IdentityBranch {
    pub fn new(store: &mut ParamStore, unet_cfg: &UnetConfig, seed: u64) -> IdentityBranch {
        let mut rng = SplitMix64::new(seed ^ 0x1de0_717);
        let [c0, c1, c2] = unet_cfg.channels();
        let g = unet_cfg.groups;
        IdentityBranch {
            stem: Conv2d::new(store, "idbranch.stem", 4, c0, 3, 1, 1, &mut rng),
            gn0: GroupNorm::new(store, "idbranch.gn0", c0, g),
            conv0: Conv2d::new(store, "idbranch.conv0", c0, c0, 3, 1, 1, &mut rng),
            port0: Conv2d::zero_1x1(store, "idbranch.port0", c0, c0),
            down1: Conv2d::new(store, "idbranch.down1", c0, c1, 3, 2, 1, &mut rng),
            gn1: GroupNorm::new(store, "idbranch.gn1", c1, g),
            conv1: Conv2d::new(store, "idbranch.conv1", c1, c1, 3, 1, 1, &mut rng),
            port1: Conv2d::zero_1x1(store, "idbranch.port1", c1, c1),
            down2: Conv2d::new(store, "idbranch.down2", c1, c2, 3, 2, 1, &mut rng),
            gn2: GroupNorm::new(store, "idbranch.gn2", c2, g),
            conv2: Conv2d::new(store, "idbranch.conv2", c2, c2, 3, 1, 1, &mut rng),
            port2: Conv2d::zero_1x1(store, "idbranch.port2", c2, c2),
            use_pixels: true,
            use_structure: true,
        }
    }

    /// Residuals for the three UNet encoder levels. `source` is `[3,H,W]`,
    /// `structure` is `[H,W]`; disabled channel groups enter as zeros.
    pub fn forward(&self, tape: &Tape, source: &Tensor, structure: &Tensor) -> Result<Vec<Var>> {
        let (h, w) = image_dims(source);
        let (sh, sw) = mask_dims(structure);
        if (sh, sw) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "source {h}x{w} vs structure {sh}x{sw}"
            )));
        }
        let n = h * w;
        let input = Tensor::from_fn(&[4, h, w], |i| {
            let (c, p) = (i / n, i % n);
            if c < 3 {
                if self.use_pixels {
                    source.data()[c * n + p]
                } else {
                    0.0
                }
            } else if self.use_structure {
                structure.data()[p]
            } else {
                0.0
            }
        });
        let x = tape.constant(input);
        let h0 = self
            .conv0
            .forward(tape, &self.gn0.forward(tape, &self.stem.forward(tape, &x)).silu());
        let r0 = self.port0.forward(tape, &h0);
        let h1 = self
            .conv1
            .forward(tape, &self.gn1.forward(tape, &self.down1.forward(tape, &h0)).silu());
        let r1 = self.port1.forward(tape, &h1);
        let h2 = self
            .conv2
            .forward(tape, &self.gn2.forward(tape, &self.down2.forward(tape, &h1)).silu());
        let r2 = self.port2.forward(tape, &h2);
        Ok(vec![r0, r1, r2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residuals_are_exactly_zero_at_init() {
        let mut store = ParamStore::new();
        let cfg = UnetConfig {
            base_channels: 8,
            ..Default::default()
        };
        let branch = IdentityBranch::new(&mut store, &cfg, 3);
        let src = Tensor::from_fn(&[3, 32, 32], |i| (i % 7) as f32 / 7.0);
        let structure = Tensor::from_fn(&[32, 32], |i| ((i % 13) == 0) as u8 as f32);
        let tape = Tape::new();
        let res = branch.forward(&tape, &src, &structure).unwrap();
        assert_eq!(res.len(), 3);
        assert_eq!(res[0].shape(), vec![8, 32, 32]);
        assert_eq!(res[1].shape(), vec![16, 16, 16]);
        assert_eq!(res[2].shape(), vec![32, 8, 8]);
        for r in &res {
            assert!(r.value().data().iter().all(|&v| v == 0.0));
        }
    }
}
