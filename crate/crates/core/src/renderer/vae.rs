use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sequence::Grid3;
use crate::toydata::{color_features, features_to_colors, ToyScene, CHANNELS};

/// Latent video `[T*H*W, C]` on a `(T, H, W)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLatent {
    pub grid: Grid3,
    pub data: Tensor<f64>,
}

impl ToyLatent {
    pub fn new(grid: Grid3, data: Tensor<f64>) -> Result<Self> {
        if data.rows() != grid.count() || data.cols() != CHANNELS {
            return Err(Error::dim("latent", data.shape(), &[grid.count(), CHANNELS]));
        }
        Ok(Self {
            grid,
            data: data.as_matrix(),
        })
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

/// Fixed per-channel affine map between pixel features in `[0, 1]` and latents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyVae {
    pub scale: [f64; CHANNELS],
    pub offset: [f64; CHANNELS],
}

impl Default for ToyVae {
    fn default() -> Self {
        Self {
            scale: [2.0, 2.0, 2.0, 1.5],
            offset: [-1.0, -1.0, -1.0, -0.75],
        }
    }
}

impl ToyVae {
    /// Encodes pixel features `[T*H*W, C]`.
    pub fn encode(&self, grid: Grid3, pixels: &Tensor<f64>) -> Result<ToyLatent> {
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {bad} outside [0, 1]")));
        }
        let mut data = pixels.as_matrix();
        if data.cols() != CHANNELS {
            return Err(Error::dim("toy vae encode", data.shape(), &[grid.count(), CHANNELS]));
        }
        for r in 0..data.rows() {
            for (c, v) in data.row_mut(r).iter_mut().enumerate() {
                *v = self.scale[c] * *v + self.offset[c];
            }
        }
        ToyLatent::new(grid, data)
    }

    /// Inverse of [`Self::encode`]; values are not clamped.
    pub fn decode(&self, latent: &ToyLatent) -> Tensor<f64> {
        let mut data = latent.data.clone();
        for r in 0..data.rows() {
            for (c, v) in data.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.offset[c]) / self.scale[c];
            }
        }
        data
    }

    pub fn encode_scene(&self, scene: &ToyScene) -> ToyLatent {
        let feats = Tensor::new(vec![scene.grid.count(), CHANNELS], color_features(&scene.frames())).expect("sized");
        self.encode(scene.grid, &feats).expect("palette features are in range")
    }

    /// Color ids of the nearest palette entries after decoding.
    pub fn decode_colors(&self, latent: &ToyLatent) -> Vec<u8> {
        features_to_colors(self.decode(latent).data())
    }
}

/// Spatial patch size; the temporal patch size is one frame.
pub const PATCH: usize = 2;

pub fn patch_dim(channels: usize) -> usize {
    PATCH * PATCH * channels
}

/// Token grid of a latent grid.
pub fn token_grid(grid: Grid3) -> Result<Grid3> {
    if !grid.h.is_multiple_of(PATCH) || !grid.w.is_multiple_of(PATCH) {
        return Err(Error::dim("patchify", &[grid.t, grid.h, grid.w], &[1, PATCH, PATCH]));
    }
    Ok(Grid3::new(grid.t, grid.h / PATCH, grid.w / PATCH))
}

/// `[T*H*W, C]` latent to `[tokens, PATCH*PATCH*C]` patches in `(dy, dx, c)` order.
pub fn patchify(latent: &ToyLatent) -> Result<Tensor<f64>> {
    let g = latent.grid;
    let tg = token_grid(g)?;
    let c = latent.channels();
    let mut out = Vec::with_capacity(latent.data.numel());
    for t in 0..tg.t {
        for ph in 0..tg.h {
            for pw in 0..tg.w {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let (h, w) = (ph * PATCH + dy, pw * PATCH + dx);
                        out.extend_from_slice(latent.data.row((t * g.h + h) * g.w + w));
                    }
                }
            }
        }
    }
    Tensor::new(vec![tg.count(), patch_dim(c)], out)
}

pub fn unpatchify(tokens: &Tensor<f64>, grid: Grid3) -> Result<ToyLatent> {
    let tg = token_grid(grid)?;
    let c = tokens.cols() / (PATCH * PATCH);
    if tokens.rows() != tg.count() || tokens.cols() != patch_dim(c) {
        return Err(Error::dim("unpatchify", tokens.shape(), &[tg.count(), patch_dim(c)]));
    }
    let mut data = Tensor::zeros(&[grid.count(), c]);
    for t in 0..tg.t {
        for ph in 0..tg.h {
            for pw in 0..tg.w {
                let row = tokens.row((t * tg.h + ph) * tg.w + pw);
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let (h, w) = (ph * PATCH + dy, pw * PATCH + dx);
                        let src = &row[(dy * PATCH + dx) * c..(dy * PATCH + dx + 1) * c];
                        data.row_mut((t * grid.h + h) * grid.w + w).copy_from_slice(src);
                    }
                }
            }
        }
    }
    ToyLatent::new(grid, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    const G: Grid3 = Grid3::new(2, 4, 6);

    #[test]
    fn vae_round_trip() {
        let vae = ToyVae::default();
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            let x: Tensor<f64> = rng.uniform_tensor(&[G.count(), CHANNELS]);
            let back = vae.decode(&vae.encode(G, &x).unwrap());
            assert!(back.max_abs_diff(&x) < 1e-10);
        }
    }

    #[test]
    fn zero_frames_map_to_offset() {
        let vae = ToyVae::default();
        let z = vae.encode(G, &Tensor::zeros(&[G.count(), CHANNELS])).unwrap();
        for r in 0..G.count() {
            assert_eq!(z.data.row(r), &vae.offset);
        }
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        let vae = ToyVae::default();
        let x = Tensor::full(&[G.count(), CHANNELS], 1.5);
        assert!(matches!(vae.encode(G, &x), Err(Error::Domain(_))));
    }

    #[test]
    fn patchify_round_trip() {
        let mut rng = Rng::new(2);
        let lat = ToyLatent::new(G, rng.normal_tensor(&[G.count(), CHANNELS])).unwrap();
        let p = patchify(&lat).unwrap();
        assert_eq!(p.shape(), &[2 * 2 * 3, 16]);
        assert_eq!(unpatchify(&p, G).unwrap(), lat);
        assert!(token_grid(Grid3::new(1, 3, 4)).is_err());
    }
}
