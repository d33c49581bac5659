//! Flow-matching renderer over toy latents.
//!
//! Time runs from `t = 0` (noise) to `t = 1` (data) with
//! `x_t = t x + (1 - t) eps` and target velocity `v = x - eps`.

mod model;
pub mod tensor_file;
mod vae;

use std::collections::BTreeMap;

pub use model::{CondNodes, Conditioning, ForwardOptions, RendererConfig, RendererModel, SourceSegment};
pub use vae::{patch_dim, patchify, token_grid, unpatchify, ToyLatent, ToyVae, PATCH};

use crate::error::{Error, Result};
use crate::guidance::{compose, CondSet, Condition, GuidanceSpec, PostCompose};
use crate::numerics::{Gradients, Graph, NodeId, ParamStore, Rng, Tensor};
use crate::schedules::{inference_time_grid, sample_timestep, TaskKind, TimestepConfig};
use crate::sequence::Grid3;
use crate::toydata::CHANNELS;

/// Segment index of the source video.
pub const VIDEO_SEGMENT: usize = 1;
/// Segment index of the reference image.
pub const REFERENCE_SEGMENT: usize = 2;

/// Interpolant between data and noise at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x_data: Tensor<f64>,
    pub x_noise: Tensor<f64>,
    pub t: f64,
}

impl FlowSample {
    pub fn new(x_data: Tensor<f64>, x_noise: Tensor<f64>, t: f64) -> Result<Self> {
        if x_data.shape() != x_noise.shape() {
            return Err(Error::dim("flow sample", x_data.shape(), x_noise.shape()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
        }
        Ok(Self { x_data, x_noise, t })
    }

    pub fn x_t(&self) -> Tensor<f64> {
        self.x_data
            .zip_map(&self.x_noise, |x, e| self.t * x + (1.0 - self.t) * e)
            .expect("same shape")
    }

    pub fn v_target(&self) -> Tensor<f64> {
        self.x_data.sub(&self.x_noise).expect("same shape")
    }
}

/// Patchifies a clean latent into a source segment.
pub fn source_segment(latent: &ToyLatent, segment_index: usize) -> Result<SourceSegment> {
    Ok(SourceSegment {
        segment_index,
        grid: token_grid(latent.grid)?,
        tokens: patchify(latent)?,
    })
}

/// One renderer training example in patch-token space.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderExample {
    /// Clean target tokens `[tokens, patch_dim]`.
    pub target: Tensor<f64>,
    /// Token grid of the target.
    pub grid: Grid3,
    pub sources: Vec<SourceSegment>,
    pub cond: Conditioning,
}

/// Velocity MSE of one flow sample, as a graph node.
#[allow(clippy::too_many_arguments)]
pub fn velocity_loss(
    model: &RendererModel,
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    sample: &FlowSample,
    grid: Grid3,
    cond: CondNodes<'_>,
    sources: &[SourceSegment],
) -> Result<NodeId> {
    let x = g.constant(sample.x_t());
    let v = model.forward(g, store, x, grid, sample.t, cond, sources, ForwardOptions::default())?;
    g.mse(v, &sample.v_target())
}

/// Draws a flow sample for a task: time from the task's weighting and shift,
/// noise from a standard normal.
pub fn draw_flow_sample(target: &Tensor<f64>, task: TaskKind, timesteps: &TimestepConfig, rng: &mut Rng) -> FlowSample {
    let t = sample_timestep(timesteps.get(task), rng);
    let noise = rng.normal_tensor(target.shape());
    FlowSample::new(target.clone(), noise, t).expect("shapes match and t in range")
}

/// Mean velocity loss over a batch and its parameter gradients.
pub fn train_step_renderer(
    model: &RendererModel,
    store: &ParamStore<f64>,
    batch: &[RenderExample],
    task: TaskKind,
    timesteps: &TimestepConfig,
    rng: &mut Rng,
) -> Result<(f64, Gradients<f64>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty renderer batch".into()));
    }
    let mut grads = Gradients::zeros_like(store);
    let mut total = 0.0;
    let w = 1.0 / batch.len() as f64;
    for ex in batch {
        let sample = draw_flow_sample(&ex.target, task, timesteps, rng);
        let mut g = Graph::new();
        let cond = ex.cond.nodes(&mut g);
        let l = velocity_loss(model, &mut g, store, &sample, ex.grid, cond, &ex.sources)?;
        total += g.value(l).item() * w;
        grads.accumulate(&g.backward(l)?, w);
    }
    Ok((total, grads))
}

/// A velocity predictor queried per condition subset.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor<f64>, t: f64, subset: CondSet) -> Result<Tensor<f64>>;
}

impl<F: Fn(&Tensor<f64>, f64, CondSet) -> Result<Tensor<f64>>> VelocityField for F {
    fn velocity(&self, x: &Tensor<f64>, t: f64, subset: CondSet) -> Result<Tensor<f64>> {
        self(x, t, subset)
    }
}

/// Euler integration from `noise` at `t = 0` to `t = 1` on the shifted grid,
/// composing guided velocities at every step.
pub fn integrate(
    field: &impl VelocityField,
    noise: Tensor<f64>,
    steps: usize,
    spec: &GuidanceSpec,
    shift: f64,
    post: &impl PostCompose<f64>,
) -> Result<Tensor<f64>> {
    integrate_with(field, noise, steps, spec, shift, post, true)
}

pub(crate) fn integrate_with(
    field: &impl VelocityField,
    noise: Tensor<f64>,
    steps: usize,
    spec: &GuidanceSpec,
    shift: f64,
    post: &impl PostCompose<f64>,
    unit_shortcut: bool,
) -> Result<Tensor<f64>> {
    spec.validate()?;
    let grid = inference_time_grid(steps, shift)?;
    let full = spec.full_set();
    let mut x = noise;
    for w in grid.windows(2) {
        let (t, dt) = (w[0], w[1] - w[0]);
        let v = if unit_shortcut && spec.is_unit() {
            field.velocity(&x, t, full)?
        } else {
            let mut forwards = BTreeMap::new();
            for s in spec.required_subsets() {
                forwards.insert(s, field.velocity(&x, t, s)?);
            }
            let guided = compose(spec, &forwards)?;
            post.apply(guided, &forwards[&full])
        };
        x.axpy(dt, &v)?;
    }
    Ok(x)
}

/// Everything the renderer may condition on at inference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderInputs {
    pub text: Option<Vec<usize>>,
    /// Planner hidden states `[n, planner_dim]`.
    pub plan: Option<Tensor<f64>>,
    pub source: Option<ToyLatent>,
    pub reference: Option<ToyLatent>,
}

struct ModelField<'a> {
    model: &'a RendererModel,
    store: &'a ParamStore<f64>,
    grid: Grid3,
    inputs: &'a RenderInputs,
    video: Option<SourceSegment>,
    reference: Option<SourceSegment>,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x: &Tensor<f64>, t: f64, subset: CondSet) -> Result<Tensor<f64>> {
        let mut sources = Vec::new();
        if subset.contains(Condition::Vid) {
            sources.extend(self.video.clone());
        }
        if subset.contains(Condition::Img) {
            sources.extend(self.reference.clone());
        }
        let cond = Conditioning {
            text: self.inputs.text.clone().filter(|_| subset.contains(Condition::Txt)),
            plan: self.inputs.plan.clone().filter(|_| subset.contains(Condition::Tgt)),
        };
        self.model
            .predict(self.store, x, self.grid, t, &cond, &sources, ForwardOptions::default())
    }
}

/// Samples a latent on `grid` (latent resolution) by guided Euler integration.
#[allow(clippy::too_many_arguments)]
pub fn render(
    model: &RendererModel,
    store: &ParamStore<f64>,
    inputs: &RenderInputs,
    grid: Grid3,
    steps: usize,
    spec: &GuidanceSpec,
    shift: f64,
    rng: &mut Rng,
    post: &impl PostCompose<f64>,
) -> Result<ToyLatent> {
    let provided = [
        inputs.source.is_some(),
        inputs.reference.is_some(),
        inputs.text.is_some(),
        inputs.plan.is_some(),
    ];
    for c in spec.present_conditions() {
        if !provided[c as usize] {
            return Err(Error::Contract(format!("guidance uses {} but no input was given", c.name())));
        }
    }
    let field = ModelField {
        model,
        store,
        grid: token_grid(grid)?,
        inputs,
        video: inputs.source.as_ref().map(|l| source_segment(l, VIDEO_SEGMENT)).transpose()?,
        reference: inputs
            .reference
            .as_ref()
            .map(|l| source_segment(l, REFERENCE_SEGMENT))
            .transpose()?,
    };
    let noise = ToyLatent::new(grid, rng.normal_tensor(&[grid.count(), CHANNELS]))?;
    let out = integrate(&field, patchify(&noise)?, steps, spec, shift, post)?;
    unpatchify(&out, grid)
}
