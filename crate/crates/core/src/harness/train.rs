use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, NodeId, ParamStore, Rng, Tensor};
use crate::planner::planner_terms;
use crate::renderer::{draw_flow_sample, velocity_loss, CondNodes};
use crate::schedules::sample_mask_ratio;
use crate::sequence::apply_target_mask;
use crate::toydata::PairRecord;

use super::checkpoint::{copy_params, Checkpoint, CheckpointMeta, VERSION};
use super::config::{Config, Stage, StageConfig};
use super::mixture::{Mixture, MixtureEntry};
use super::optim::{Ema, OptimizerState};
use super::system::{apply_keep, draw_sample, pair_pool, planner_dropout, renderer_keep, Prepared, System};

const PAIR_STREAM: u64 = 0x5041_4952;

/// Per-example loss values (absent terms are `None`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ntp: Option<f64>,
    pub visual: Option<f64>,
    pub dit: Option<f64>,
    pub total: f64,
}

/// Builds one example's weighted loss and returns its gradients.
///
/// Stage II conditions the renderer on hidden states of the frozen planner;
/// stage III routes them through the graph so the renderer loss also trains
/// the planner. In both, only rows at text, source and unmasked target
/// positions are passed on; masked rows feed the embedding decoder.
pub fn example_step(
    sys: &System,
    store: &ParamStore<f64>,
    cfg: &Config,
    stage: &StageConfig,
    prep: &Prepared,
    rng: &mut Rng,
) -> Result<(LossParts, Option<Gradients<f64>>)> {
    let lam = stage.lambdas;
    let view = planner_dropout(&prep.seq, &cfg.condition_dropout, rng)?;
    let masked = match prep.task {
        Some(t) if !view.target_indices().is_empty() => {
            let ratio = sample_mask_ratio(&cfg.schedules.mask_ratios, t, rng);
            apply_target_mask(&view, ratio, &vec![0.0; view.embeddings().cols()], rng)?
        }
        _ => view.clone(),
    };
    let mut g = Graph::new();
    let mut parts = LossParts::default();
    let mut terms: Vec<NodeId> = Vec::new();
    let mut z = None;
    if stage.stage != Stage::II {
        let t = planner_terms(&sys.planner, &sys.decoder, &mut g, store, &masked, view.embeddings(), rng)?;
        z = Some(t.z);
        if let Some(n) = t.ntp {
            parts.ntp = Some(g.value(n).item());
            terms.push(g.scale(n, lam.text));
        }
        if let Some(v) = t.visual {
            parts.visual = Some(g.value(v).item());
            terms.push(g.scale(v, lam.visual));
        }
    }
    if let (Some(task), Some(ex), true) = (prep.task, &prep.render, lam.dit > 0.0) {
        let keep = renderer_keep(&cfg.condition_dropout, rng);
        let ex = apply_keep(ex, keep);
        let rows: Vec<usize> = (0..masked.len())
            .filter(|&i| !masked.tokens()[i].masked)
            .collect();
        let plan = if keep[3] && !rows.is_empty() {
            match z {
                Some(z) => Some(g.gather_rows(z, &rows)?),
                None => {
                    let h = sys.planner.hidden(store, &masked)?;
                    let sel: Vec<Vec<f64>> = rows.iter().map(|&r| h.row(r).to_vec()).collect();
                    Some(g.constant(Tensor::from_rows(&sel)?))
                }
            }
        } else {
            None
        };
        let sample = draw_flow_sample(&ex.target, task, &cfg.schedules.timesteps, rng);
        let cond = CondNodes {
            text: ex.cond.text.as_deref(),
            plan,
        };
        let l = velocity_loss(&sys.renderer, &mut g, store, &sample, ex.grid, cond, &ex.sources)?;
        parts.dit = Some(g.value(l).item());
        terms.push(g.scale(l, lam.dit));
    }
    let Some(mut total) = terms.first().copied() else {
        return Ok((parts, None));
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    parts.total = g.value(total).item();
    Ok((parts, Some(g.backward(total)?)))
}

/// Mutable state of a stage run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub step: usize,
    pub opt: OptimizerState,
    pub ema: Ema,
}

impl TrainState {
    pub fn fresh(cfg: &Config, stage: Stage, store: &ParamStore<f64>) -> Result<Self> {
        let sc = cfg.stage(stage)?;
        Ok(Self {
            stage,
            step: 0,
            opt: OptimizerState::new(cfg.train.optimizer, store.len()),
            ema: Ema::new(store, sc.phases[0].ema_decay, cfg.train.ema_warmup),
        })
    }

    pub fn checkpoint(&self, cfg: &Config, store: &ParamStore<f64>) -> Result<Checkpoint> {
        let sc = cfg.stage(self.stage)?;
        Ok(Checkpoint {
            meta: CheckpointMeta {
                version: VERSION,
                stage: self.stage,
                step: self.step,
                total_steps: sc.total_steps(),
                seed: cfg.seed,
                optimizer: self.opt.config,
                optimizer_step: self.opt.step,
                ema_decay: self.ema.decay,
                ema_warmup: self.ema.warmup,
                ema_updates: self.ema.updates,
                params: store.iter().map(|(_, n, _)| n.to_string()).collect(),
            },
            store: store.clone(),
            ema: self.ema.clone(),
            opt: self.opt.clone(),
        })
    }

    /// Restores a checkpoint into `store` and returns the state to resume from.
    pub fn restore(ck: &Checkpoint, cfg: &Config, store: &mut ParamStore<f64>) -> Result<Self> {
        if ck.meta.seed != cfg.seed {
            return Err(Error::Startup(format!(
                "checkpoint seed {} differs from configured seed {}",
                ck.meta.seed, cfg.seed
            )));
        }
        copy_params(store, &ck.store)?;
        Ok(Self {
            stage: ck.meta.stage,
            step: ck.meta.step,
            opt: ck.opt.clone(),
            ema: ck.ema.clone(),
        })
    }
}

/// Running means over a logging window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: usize,
    pub total: f64,
    pub ntp: Option<f64>,
    pub visual: Option<f64>,
    pub dit: Option<f64>,
    pub seconds: f64,
}

#[derive(Default)]
struct Window {
    n: usize,
    total: f64,
    sums: [(f64, usize); 3],
}

impl Window {
    fn add(&mut self, p: &LossParts) {
        self.n += 1;
        self.total += p.total;
        for (s, v) in self.sums.iter_mut().zip([p.ntp, p.visual, p.dit]) {
            if let Some(v) = v {
                s.0 += v;
                s.1 += 1;
            }
        }
    }

    fn flush(&mut self, step: usize, phase: usize, seconds: f64) -> StepLog {
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        let log = StepLog {
            step,
            phase,
            total: self.total / self.n.max(1) as f64,
            ntp: mean(self.sums[0]),
            visual: mean(self.sums[1]),
            dit: mean(self.sums[2]),
            seconds,
        };
        *self = Window::default();
        log
    }
}

/// Random stream of one step; depends only on the seed, stage and step.
pub fn step_rng(seed: u64, stage: Stage, step: usize) -> Rng {
    Rng::new(seed).fork_path(&[stage.index(), step as u64])
}

/// Pairs mined for a stage; empty when no phase samples pair data.
pub fn stage_pairs(cfg: &Config, stage: &StageConfig) -> Result<Vec<PairRecord>> {
    let uses_pairs = stage.mixtures()?.iter().any(|m| m.pair_fraction() > 0.0);
    if !uses_pairs {
        return Ok(Vec::new());
    }
    pair_pool(&cfg.data, &mut Rng::with_stream(cfg.seed, PAIR_STREAM).fork(stage.stage.index()))
}

/// Mixture probabilities used at `local` step of phase `phase`. Pair data in
/// stage II decays linearly to zero over the phase that contains it.
fn entry_at(stage: &StageConfig, mixes: &[Mixture], phase: usize, local: usize, rng: &mut Rng) -> MixtureEntry {
    let m = &mixes[phase];
    if stage.stage == Stage::II {
        m.sample_at(local, stage.phases[phase].steps, rng)
    } else {
        m.sample(rng)
    }
}

/// Advances `state` to step `until` (capped at the stage budget), calling
/// `on_step` after every update with the step count and losses.
pub fn run_stage(
    sys: &mut System,
    cfg: &Config,
    state: &mut TrainState,
    until: usize,
    mut on_step: impl FnMut(&TrainState, &ParamStore<f64>, &LossParts) -> Result<()>,
) -> Result<()> {
    let sc = cfg.stage(state.stage)?;
    let mixes = sc.mixtures()?;
    let pairs = stage_pairs(cfg, sc)?;
    let trainable = sys.trainable(state.stage);
    let until = until.min(sc.total_steps());
    while state.step < until {
        let (phase, local) = sc.phase_at(state.step).expect("step inside budget");
        let mut rng = step_rng(cfg.seed, state.stage, state.step);
        let mut grads = Gradients::zeros_like(&sys.store);
        let w = 1.0 / sc.batch as f64;
        let mut window = Window::default();
        for _ in 0..sc.batch {
            let entry = entry_at(sc, &mixes, phase, local, &mut rng);
            let sample = draw_sample(entry, &cfg.data, sc.families.as_deref(), &pairs, &mut rng)?;
            let prep = sys.prepare(&sample)?;
            let (parts, g) = example_step(sys, &sys.store, cfg, sc, &prep, &mut rng)?;
            if let Some(g) = g {
                grads.accumulate(&g, w);
            }
            window.add(&parts);
        }
        let log = window.flush(state.step, phase, 0.0);
        let mean = LossParts {
            ntp: log.ntp,
            visual: log.visual,
            dit: log.dit,
            total: log.total,
        };
        state.opt.apply(&mut sys.store, &grads, &trainable, sc.lr, cfg.train.clip)?;
        state.ema.decay = sc.phases[phase].ema_decay;
        state.ema.update(&sys.store, &trainable);
        state.step += 1;
        on_step(state, &sys.store, &mean)?;
    }
    Ok(())
}

/// Checkpoint path of a stage inside an output directory.
pub fn stage_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("stage-{}.prck", stage.name()))
}

/// Loads the prerequisites of `stage` from `out` into `sys`.
pub fn load_prerequisites(sys: &mut System, out: &Path, stage: Stage) -> Result<()> {
    for &pre in stage.prerequisites() {
        let path = stage_path(out, pre);
        if !path.exists() {
            return Err(Error::Startup(format!(
                "stage {stage} needs a finished stage {pre} checkpoint at {}",
                path.display()
            )));
        }
        let ck = Checkpoint::load(&path)?;
        if !ck.meta.is_complete() {
            return Err(Error::Startup(format!("stage {pre} checkpoint at {} is unfinished", path.display())));
        }
    }
    if let Some(&last) = stage.prerequisites().last() {
        let ck = Checkpoint::load(&stage_path(out, last))?;
        copy_params(&mut sys.store, &ck.store)?;
    }
    Ok(())
}

/// Summary of a stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub resumed_from: usize,
    pub seconds: f64,
    pub log: Vec<StepLog>,
}

/// Trains one stage into `out`, resuming from an unfinished checkpoint there
/// when `resume` is set. Writes the checkpoint atomically every
/// `checkpoint_every` steps and at the end.
pub fn train_stage(
    sys: &mut System,
    cfg: &Config,
    stage: Stage,
    out: &Path,
    resume: bool,
    mut progress: impl FnMut(&StepLog),
) -> Result<StageReport> {
    let path = stage_path(out, stage);
    let mut state = match Checkpoint::load(&path) {
        Ok(ck) if resume && ck.meta.stage == stage => TrainState::restore(&ck, cfg, &mut sys.store)?,
        _ => {
            load_prerequisites(sys, out, stage)?;
            TrainState::fresh(cfg, stage, &sys.store)?
        }
    };
    let resumed_from = state.step;
    let total = cfg.stage(stage)?.total_steps();
    let every = cfg.train.checkpoint_every;
    let log_every = cfg.train.log_every.max(1);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut window = Window::default();
    let sc = cfg.stage(stage)?;
    run_stage(sys, cfg, &mut state, total, |st, store, parts| {
        window.add(parts);
        if st.step % log_every == 0 || st.step == total {
            let phase = sc.phase_at(st.step - 1).map_or(0, |p| p.0);
            let entry = window.flush(st.step, phase, start.elapsed().as_secs_f64());
            progress(&entry);
            log.push(entry);
        }
        if every > 0 && st.step % every == 0 && st.step < total {
            st.checkpoint(cfg, store)?.save(&path)?;
        }
        Ok(())
    })?;
    state.checkpoint(cfg, &sys.store)?.save(&path)?;
    Ok(StageReport {
        stage,
        steps: state.step,
        resumed_from,
        seconds: start.elapsed().as_secs_f64(),
        log,
    })
}
