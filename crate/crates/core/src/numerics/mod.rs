//! Dense tensors, a small reverse-mode graph, counter-based randomness and a
//! finite-difference oracle.

pub mod fdcheck;
pub mod graph;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use graph::{BoolMatrix, Gradients, Graph, NodeId, ParamId, ParamStore};
pub use rng::{sample_normal, sample_uniform, Rng, RngState};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

use crate::error::Result;

/// Matrix product of two tensors (see [`Tensor::matmul`]).
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.matmul(b)
}

/// Dense layer `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Registers a layer initialized with `N(0, gain^2 / fan_in)` weights and zero bias.
    pub fn new(
        store: &mut ParamStore<f64>,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        bias: bool,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            rng.normal_tensor::<f64>(&[fan_in, fan_out]).scale(std),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])));
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore<f64>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}
