use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::NoPostCompose;
use crate::numerics::{ParamId, ParamStore, Rng, Tensor};
use crate::planner::{plan, planning_input, restrict, EmbeddingDecoder, PlanResult, PlannerModel, ToyVit};
use crate::renderer::{
    patchify, render, source_segment, token_grid, Conditioning, RenderExample, RenderInputs, RendererModel, ToyLatent,
    ToyVae, REFERENCE_SEGMENT, VIDEO_SEGMENT,
};
use crate::schedules::TaskKind;
use crate::sequence::{serialize, Grid3, SegmentKind, TokenSequence};
use crate::toydata::{gen_edit_case_family, gen_scene, vocab, EditCase, EditFamily, PairRecord, ToyScene};

use super::config::{Config, DataConfig, DropoutConfig, ModelConfig, Stage};
use super::mixture::MixtureEntry;

const INIT_STREAM: u64 = 0x494e_4954;

/// Planner, embedding decoder and renderer sharing one parameter store,
/// plus the frozen encoders that define their targets.
#[derive(Debug, Clone)]
pub struct System {
    pub planner: PlannerModel,
    pub decoder: EmbeddingDecoder,
    pub renderer: RendererModel,
    pub vit: ToyVit,
    pub vae: ToyVae,
    pub store: ParamStore<f64>,
}

impl System {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.renderer.planner_dim != cfg.planner.dim {
            return Err(Error::Config("renderer planner_dim must equal planner dim".into()));
        }
        let mut store = ParamStore::new();
        let rng = Rng::with_stream(seed, INIT_STREAM);
        let planner = PlannerModel::new(cfg.planner.clone(), &mut store, &mut rng.fork(0), "planner")?;
        let decoder = EmbeddingDecoder::new(
            cfg.decoder.clone(),
            cfg.planner.embed_dim,
            cfg.planner.dim,
            &mut store,
            &mut rng.fork(1),
            "decoder",
        )?;
        let renderer = RendererModel::new(cfg.renderer.clone(), &mut store, &mut rng.fork(2), "renderer")?;
        Ok(Self {
            planner,
            decoder,
            renderer,
            vit: ToyVit::new(cfg.vit_seed, cfg.planner.embed_dim),
            vae: ToyVae::default(),
            store,
        })
    }

    pub fn trainable(&self, stage: Stage) -> Vec<ParamId> {
        let prefixes = stage.trainable_prefixes();
        self.store
            .iter()
            .filter(|(_, name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Planner sequence with ground-truth embeddings and, for visual samples,
    /// the renderer example (text condition set, plan left empty).
    pub fn prepare(&self, sample: &Sample) -> Result<Prepared> {
        let Some(target) = &sample.target else {
            let seq = TokenSequence::text_only(sample.instruction.len())?
                .with_text_ids(&sample.instruction)?
                .with_embeddings(Tensor::zeros(&[sample.instruction.len(), self.vit.embed_dim()]))?;
            return Ok(Prepared {
                task: None,
                seq,
                render: None,
            });
        };
        let visuals: Vec<(&ToyScene, usize)> = [(&sample.source, VIDEO_SEGMENT), (&sample.reference, REFERENCE_SEGMENT)]
            .into_iter()
            .filter_map(|(s, i)| s.as_ref().map(|s| (s, i)))
            .collect();
        let mut grids = Vec::new();
        let mut rows = Vec::new();
        for (scene, _) in &visuals {
            grids.push(token_grid(scene.grid)?);
            rows.push(self.vit.embed_scene(scene)?);
        }
        let target_grid = token_grid(target.grid)?;
        rows.push(self.vit.embed_scene(target)?);
        let mut data = Vec::new();
        data.extend(std::iter::repeat_n(0.0, sample.instruction.len() * self.vit.embed_dim()));
        for r in &rows {
            data.extend_from_slice(r.data());
        }
        let n = data.len() / self.vit.embed_dim();
        let seq = serialize(sample.instruction.len(), &grids, target_grid)?
            .with_text_ids(&sample.instruction)?
            .with_embeddings(Tensor::new(vec![n, self.vit.embed_dim()], data)?)?;
        let sources = visuals
            .iter()
            .map(|(s, i)| source_segment(&self.vae.encode_scene(s), *i))
            .collect::<Result<Vec<_>>>()?;
        let render = RenderExample {
            target: patchify(&self.vae.encode_scene(target))?,
            grid: target_grid,
            sources,
            cond: Conditioning {
                text: Some(sample.instruction.clone()),
                plan: None,
            },
        };
        Ok(Prepared {
            task: sample.task,
            seq,
            render: Some(render),
        })
    }

    /// Plans and renders one case; returns decoded color ids and the plan.
    pub fn edit(&self, store: &ParamStore<f64>, cfg: &Config, sample: &Sample, rng: &mut Rng) -> Result<EditOutput> {
        let task = sample
            .task
            .ok_or_else(|| Error::Contract("editing needs a visual task".into()))?;
        let target_grid = sample
            .target
            .as_ref()
            .map(|t| t.grid)
            .unwrap_or_else(|| cfg.data.cases.grid_for(task));
        let mut sources = Vec::new();
        for s in [&sample.source, &sample.reference].into_iter().flatten() {
            sources.push((token_grid(s.grid)?, self.vit.embed_scene(s)?));
        }
        let input = planning_input(&sample.instruction, &sources, token_grid(target_grid)?, self.vit.embed_dim())?;
        let planned = plan(&self.planner, &self.decoder, store, &input, &cfg.inference.plan, &mut rng.fork(0))?;
        let spec = cfg.guidance.spec(task)?;
        let steps = cfg.inference.render_steps.unwrap_or(cfg.guidance.row(task).steps);
        let inputs = RenderInputs {
            text: Some(sample.instruction.clone()),
            plan: Some(planned.hidden.clone()),
            source: sample.source.as_ref().map(|s| self.vae.encode_scene(s)),
            reference: sample.reference.as_ref().map(|s| self.vae.encode_scene(s)),
        };
        let latent = render(
            &self.renderer,
            store,
            &inputs,
            target_grid,
            steps,
            &spec,
            cfg.inference.shift,
            &mut rng.fork(1),
            &NoPostCompose,
        )?;
        Ok(EditOutput {
            colors: self.vae.decode_colors(&latent),
            latent,
            plan: planned,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub colors: Vec<u8>,
    pub latent: ToyLatent,
    pub plan: PlanResult,
}

/// A training or evaluation sample before model-specific preparation.
/// Edit-case JSON deserializes into it directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `None` for text-only samples.
    pub task: Option<TaskKind>,
    pub instruction: Vec<usize>,
    #[serde(default)]
    pub source: Option<ToyScene>,
    #[serde(default)]
    pub reference: Option<ToyScene>,
    #[serde(default)]
    pub target: Option<ToyScene>,
}

impl From<&EditCase> for Sample {
    fn from(c: &EditCase) -> Self {
        Self {
            task: Some(c.task),
            instruction: c.instruction.clone(),
            source: c.source.clone(),
            reference: c.reference.clone(),
            target: Some(c.target.clone()),
        }
    }
}

impl Sample {
    /// Mined pair used as an unconstrained edit from `clip_a` to `clip_b`.
    pub fn from_pair(pair: &PairRecord, image: bool) -> Self {
        let (a, b) = if image {
            (pair.clip_a.first_frame(), pair.clip_b.first_frame())
        } else {
            (pair.clip_a.clone(), pair.clip_b.clone())
        };
        Self {
            task: Some(if image { TaskKind::I2I } else { TaskKind::V2V }),
            instruction: vec![vocab::BOS, vocab::VARY, vocab::EOS],
            source: Some(a),
            reference: None,
            target: Some(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub task: Option<TaskKind>,
    /// Planner sequence carrying ground-truth embeddings.
    pub seq: TokenSequence,
    pub render: Option<RenderExample>,
}

/// Similarity-band pairs mined from a seeded scene pool.
pub fn pair_pool(data: &DataConfig, rng: &mut Rng) -> Result<Vec<PairRecord>> {
    let c = &data.cases;
    let mut pool = Vec::with_capacity(data.pair_pool);
    let lo = c.min_objects.max(1);
    let hi = c.max_objects.max(lo);
    for _ in 0..data.pair_pool {
        let n = lo + rng.below(hi - lo + 1);
        pool.push(gen_scene(rng, c.grid, n)?);
    }
    Ok(crate::toydata::mine_pairs(&pool, rng))
}

/// Draws one sample for a mixture entry.
pub fn draw_sample(
    entry: MixtureEntry,
    data: &DataConfig,
    families: Option<&[EditFamily]>,
    pairs: &[PairRecord],
    rng: &mut Rng,
) -> Result<Sample> {
    let case = |task: TaskKind, rng: &mut Rng| -> Result<EditCase> {
        let allowed = EditFamily::for_task(task);
        let pool: Vec<EditFamily> = match families {
            Some(f) if allowed.iter().any(|a| f.contains(a)) => allowed.iter().copied().filter(|a| f.contains(a)).collect(),
            _ => allowed.to_vec(),
        };
        let family = pool[rng.below(pool.len())];
        gen_edit_case_family(rng, &data.cases, task, family)
    };
    match entry {
        MixtureEntry::Task(t) => Ok(Sample::from(&case(t, rng)?)),
        MixtureEntry::VideoPair | MixtureEntry::ImagePair if !pairs.is_empty() => {
            Ok(Sample::from_pair(&pairs[rng.below(pairs.len())], entry == MixtureEntry::ImagePair))
        }
        MixtureEntry::VideoPair => Ok(Sample::from(&case(TaskKind::V2V, rng)?)),
        MixtureEntry::ImagePair => Ok(Sample::from(&case(TaskKind::I2I, rng)?)),
        MixtureEntry::Text => {
            let t = TaskKind::ALL[rng.below(TaskKind::ALL.len())];
            let c = case(t, rng)?;
            Ok(Sample {
                task: None,
                instruction: c.instruction,
                source: None,
                reference: None,
                target: None,
            })
        }
    }
}

/// Planner view with text and sources dropped independently.
pub fn planner_dropout(seq: &TokenSequence, d: &DropoutConfig, rng: &mut Rng) -> Result<TokenSequence> {
    let drop_text = rng.bernoulli(d.planner_text);
    let drop_sources = rng.bernoulli(d.planner_sources);
    let has_target = seq.tokens().iter().any(|t| t.kind == SegmentKind::VisualTarget);
    if !has_target || (!drop_text && !drop_sources) {
        return Ok(seq.clone());
    }
    restrict(seq, !drop_text, !drop_sources)
}

/// Which of (vid, img, txt, tgt) survive renderer condition dropout.
pub fn renderer_keep(d: &DropoutConfig, rng: &mut Rng) -> [bool; 4] {
    std::array::from_fn(|_| !rng.bernoulli(d.renderer))
}

/// Applies `keep` to a renderer example's sources and text; the plan is set
/// by the caller.
pub fn apply_keep(ex: &RenderExample, keep: [bool; 4]) -> RenderExample {
    let mut out = ex.clone();
    out.sources.retain(|s| match s.segment_index {
        VIDEO_SEGMENT => keep[0],
        REFERENCE_SEGMENT => keep[1],
        _ => true,
    });
    if !keep[2] {
        out.cond.text = None;
    }
    out
}

/// Grid of the rendered output for a task.
pub fn output_grid(cfg: &Config, task: TaskKind) -> Grid3 {
    cfg.data.cases.grid_for(task)
}
