use crate::error::Result;
use crate::numerics::{Rng, Tensor};
use crate::renderer::{patch_dim, patchify, ToyLatent};
use crate::sequence::Grid3;
use crate::toydata::{color_features, ToyScene, CHANNELS};

/// Frozen random patch encoder that defines the planner's target embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVit {
    w: Tensor<f64>,
    b: Tensor<f64>,
}

impl ToyVit {
    pub fn new(seed: u64, embed_dim: usize) -> Self {
        let mut rng = Rng::with_stream(seed, 0x0056_4954);
        let pd = patch_dim(CHANNELS);
        let std = 1.5 / (pd as f64).sqrt();
        Self {
            w: rng.normal_tensor::<f64>(&[pd, embed_dim]).scale(std),
            b: rng.normal_tensor::<f64>(&[1, embed_dim]).scale(0.1),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w.cols()
    }

    /// Embeds pixel features `[T*H*W, C]` in `[0, 1]`, one row per patch token.
    pub fn embed(&self, grid: Grid3, pixels: &Tensor<f64>) -> Result<Tensor<f64>> {
        // Patch grouping is shared with the renderer so token orders agree.
        let centered = pixels.map(|v| 2.0 * v - 1.0);
        let patches = patchify(&ToyLatent::new(grid, centered)?)?;
        let mut out = patches.matmul(&self.w)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(self.b.data()) {
                *v = (*v + b).tanh();
            }
        }
        Ok(out)
    }

    pub fn embed_scene(&self, scene: &ToyScene) -> Result<Tensor<f64>> {
        let feats = Tensor::new(vec![scene.grid.count(), CHANNELS], color_features(&scene.frames()))?;
        self.embed(scene.grid, &feats)
    }
}
