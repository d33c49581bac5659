use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceTable;
use crate::planner::{DecoderConfig, PlanOptions, PlannerConfig};
use crate::renderer::RendererConfig;
use crate::schedules::{MaskRatioConfig, TaskKind, TimestepConfig};
use crate::toydata::{CaseConfig, EditFamily};

use super::mixture::Mixture;
use super::optim::OptimizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::I, Stage::II, Stage::III];

    pub fn name(self) -> &'static str {
        match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }

    /// Parameter-name prefixes this stage updates.
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::I => &["planner.", "decoder."],
            Stage::II => &["renderer."],
            Stage::III => &["planner.", "decoder.", "renderer."],
        }
    }

    /// Stages whose checkpoints must exist before this one starts.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::I => &[],
            Stage::II => &[Stage::I],
            Stage::III => &[Stage::I, Stage::II],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Stage::I),
            "II" | "2" => Ok(Stage::II),
            "III" | "3" => Ok(Stage::III),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

/// Weights of the next-token, masked-embedding and velocity losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub text: f64,
    pub visual: f64,
    pub dit: f64,
}

impl Lambdas {
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::I => Self { text: 0.2, visual: 1.0, dit: 0.0 },
            Stage::II => Self { text: 0.0, visual: 0.0, dit: 1.0 },
            Stage::III => Self { text: 0.2, visual: 1.0, dit: 1.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("text", self.text), ("visual", self.visual), ("dit", self.dit)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// `text * l_ntp + visual * l_visual + dit * l_dit`.
pub fn total_loss(l_ntp: f64, l_visual: f64, l_dit: f64, lambdas: Lambdas) -> Result<f64> {
    lambdas.validate()?;
    Ok(lambdas.text * l_ntp + lambdas.visual * l_visual + lambdas.dit * l_dit)
}

/// One row of a stage: its own budget, mixture and EMA decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub steps: usize,
    pub ema_decay: f64,
    /// Entry name (task, `video_pair`, `image_pair`, `text`) to weight.
    pub mixture: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub lambdas: Lambdas,
    pub phases: Vec<PhaseConfig>,
    /// Restricts the edit families drawn for source-editing tasks.
    #[serde(default)]
    pub families: Option<Vec<EditFamily>>,
}

fn default_batch() -> usize {
    1
}

impl StageConfig {
    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    /// Phase index and step within the phase for a global step.
    pub fn phase_at(&self, step: usize) -> Option<(usize, usize)> {
        let mut start = 0;
        for (i, p) in self.phases.iter().enumerate() {
            if step < start + p.steps {
                return Some((i, step - start));
            }
            start += p.steps;
        }
        None
    }

    pub fn mixtures(&self) -> Result<Vec<Mixture>> {
        self.phases.iter().map(|p| Mixture::from_weights(&p.mixture)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        let l = self.lambdas;
        match self.stage {
            Stage::I if l.dit != 0.0 => return Err(Error::Config("stage I must have dit weight 0".into())),
            Stage::II if l.text != 0.0 || l.visual != 0.0 => {
                return Err(Error::Config("stage II must have text and visual weights 0".into()))
            }
            _ => {}
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::Config(format!("stage {} learning rate must be nonnegative", self.stage)));
        }
        if self.batch == 0 || self.phases.is_empty() {
            return Err(Error::Config(format!("stage {} needs a positive batch and a phase", self.stage)));
        }
        for p in &self.phases {
            if !(0.0..1.0).contains(&p.ema_decay) {
                return Err(Error::Config(format!("EMA decay {} outside [0, 1)", p.ema_decay)));
            }
        }
        self.mixtures()?;
        Ok(())
    }
}

fn weights(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

fn phase(steps: usize, ema_decay: f64, pairs: &[(&str, f64)]) -> PhaseConfig {
    PhaseConfig {
        steps,
        ema_decay,
        mixture: weights(pairs),
    }
}

/// Stage table with the published mixture percentages. Interleaved and
/// understanding data both map to text-only samples; the reasoning column of
/// the last row has no toy counterpart and is left out.
pub fn default_stages() -> Vec<StageConfig> {
    let tasks = |w: [f64; 6]| -> Vec<(&'static str, f64)> {
        ["t2i", "t2v", "i2i", "v2v", "i2v", "iv2v"].into_iter().zip(w).collect()
    };
    let with = |mut v: Vec<(&'static str, f64)>, extra: &[(&'static str, f64)]| {
        v.extend_from_slice(extra);
        v
    };
    let stage = |stage, phases| StageConfig {
        stage,
        lr: 1e-3,
        batch: 1,
        lambdas: Lambdas::for_stage(stage),
        phases,
        families: None,
    };
    vec![
        stage(
            Stage::I,
            vec![phase(
                400,
                0.999,
                &with(
                    tasks([13.0, 19.0, 3.0, 1.0, 1.0, 1.0]),
                    &[("video_pair", 15.0), ("image_pair", 21.0), ("text", 26.0)],
                ),
            )],
        ),
        stage(
            Stage::II,
            vec![
                phase(
                    200,
                    0.9995,
                    &with(
                        tasks([31.0, 42.0, 4.0, 0.4, 0.4, 0.3]),
                        &[("video_pair", 11.0), ("image_pair", 11.0)],
                    ),
                ),
                phase(200, 0.9999, &tasks([20.0, 30.0, 40.0, 3.3, 3.5, 3.2])),
            ],
        ),
        stage(
            Stage::III,
            vec![
                phase(200, 0.9995, &with(tasks([16.0, 24.0, 32.0, 2.6, 2.8, 2.6]), &[("text", 20.0)])),
                phase(200, 0.999, &with(tasks([12.0, 18.0, 24.0, 2.0, 2.0, 2.0]), &[("text", 20.0)])),
            ],
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub planner: PlannerConfig,
    pub decoder: DecoderConfig,
    pub renderer: RendererConfig,
    /// Seed of the frozen patch encoder defining planner targets.
    pub vit_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            planner: PlannerConfig::default(),
            decoder: DecoderConfig::default(),
            renderer: RendererConfig::default(),
            vit_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub cases: CaseConfig,
    /// Scenes mined for similarity pairs at the start of a stage.
    pub pair_pool: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            cases: CaseConfig::default(),
            pair_pool: 48,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub mask_ratios: MaskRatioConfig,
    pub timesteps: TimestepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub plan: PlanOptions,
    /// Flow shift of the renderer's sampling grid.
    pub shift: f64,
    /// Overrides the per-task step counts of the guidance table.
    pub render_steps: Option<usize>,
    pub use_ema: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            plan: PlanOptions::default(),
            shift: 5.0,
            render_steps: None,
            use_ema: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub clip: Option<f64>,
    pub ema_warmup: bool,
    /// Checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            clip: Some(1.0),
            ema_warmup: true,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

/// Independent drop probabilities for each condition during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutConfig {
    pub planner_text: f64,
    pub planner_sources: f64,
    pub renderer: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            planner_text: 0.1,
            planner_sources: 0.1,
            renderer: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub cases: usize,
    pub tasks: Vec<TaskKind>,
    pub families: Vec<EditFamily>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cases: 200,
            tasks: vec![TaskKind::V2V],
            families: vec![EditFamily::Recolor, EditFamily::Remove],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedules: ScheduleConfig,
    pub guidance: GuidanceTable,
    pub inference: InferenceConfig,
    pub train: TrainConfig,
    pub condition_dropout: DropoutConfig,
    pub stages: Vec<StageConfig>,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedules: ScheduleConfig::default(),
            guidance: GuidanceTable::default(),
            inference: InferenceConfig::default(),
            train: TrainConfig::default(),
            condition_dropout: DropoutConfig::default(),
            stages: default_stages(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn stage(&self, stage: Stage) -> Result<&StageConfig> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .ok_or_else(|| Error::Config(format!("no configuration for stage {stage}")))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.planner.validate()?;
        m.renderer.validate()?;
        if m.renderer.planner_dim != m.planner.dim {
            return Err(Error::Config(format!(
                "renderer planner_dim {} must equal planner dim {}",
                m.renderer.planner_dim, m.planner.dim
            )));
        }
        self.schedules.mask_ratios.validate()?;
        self.schedules.timesteps.validate()?;
        for t in TaskKind::ALL {
            self.guidance.spec(t)?;
        }
        if self.inference.shift.is_nan() || self.inference.shift < 1.0 {
            return Err(Error::Config("inference shift must be >= 1".into()));
        }
        let d = self.condition_dropout;
        for p in [d.planner_text, d.planner_sources, d.renderer] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        let c = &self.data.cases;
        if !c.grid.h.is_multiple_of(crate::renderer::PATCH) || !c.grid.w.is_multiple_of(crate::renderer::PATCH) {
            return Err(Error::Config("grid height and width must be multiples of the patch size".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()?;
            if self.stages[..i].iter().any(|o| o.stage == s.stage) {
                return Err(Error::Config(format!("stage {} configured twice", s.stage)));
            }
        }
        Ok(())
    }
}
