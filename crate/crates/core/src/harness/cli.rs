use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::guidance::NoPostCompose;
use crate::numerics::{ParamStore, Rng};
use crate::planner::{plan, planning_input};
use crate::renderer::tensor_file::{load_tensor, save_tensor};
use crate::renderer::{render, token_grid, RenderInputs};
use crate::schedules::TaskKind;
use crate::toydata::{color_features, vocab, CHANNELS};

use super::checkpoint::{copy_params, Checkpoint};
use super::config::{Config, Stage};
use super::data::gen_data;
use super::eval::{default_workers, eval_cases, evaluate};
use super::invariants::run_invariants;
use super::system::{Sample, System};
use super::train::{stage_path, train_stage};

#[derive(Debug, Parser)]
#[command(name = "planrender", version, about = "Toy planner/renderer for video generation and editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Checkpoint to load; the untrained model is used when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use raw weights instead of the EMA shadow.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset from a stage mixture.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Stage whose mixture is sampled.
        #[arg(long, default_value = "I")]
        stage: Stage,
        #[arg(long, default_value_t = 1000)]
        cases: usize,
    },
    /// Train one stage or all three in order.
    Train {
        #[command(flatten)]
        common: Common,
        /// I, II, III or all.
        #[arg(long, default_value = "all")]
        stage: String,
        /// Continue an unfinished checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run the planner on a case and write its hidden states.
    Plan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        case: PathBuf,
    },
    /// Render a case conditioned on saved planner states.
    Render {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        case: PathBuf,
        /// Hidden states written by `plan`.
        #[arg(long)]
        plan: PathBuf,
    },
    /// Plan and render one case end to end.
    Edit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        task: Option<TaskKind>,
    },
    /// Score held-out cases with the oracles.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Number of held-out cases; defaults to the configured count.
        #[arg(long)]
        cases: Option<usize>,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        workers: Option<usize>,
        /// Also run the invariant suite and record its verdict.
        #[arg(long)]
        with_invariants: bool,
    },
    /// Run the invariant suite.
    Check {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_model(cfg: &Config, m: &ModelArgs) -> Result<(System, ParamStore<f64>)> {
    let mut sys = System::new(&cfg.model, cfg.seed)?;
    if let Some(path) = &m.checkpoint {
        let ck = Checkpoint::load(path)
            .map_err(|e| Error::Startup(format!("cannot load checkpoint {}: {e}", path.display())))?;
        copy_params(&mut sys.store, &ck.store)?;
        if cfg.inference.use_ema && !m.raw {
            let ema = ck.ema.apply_to(&sys.store);
            return Ok((sys, ema));
        }
    }
    let store = sys.store.clone();
    Ok((sys, store))
}

fn load_case(path: &Path, task: Option<TaskKind>) -> Result<Sample> {
    let text = std::fs::read_to_string(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let mut sample: Sample = serde_json::from_str(first).or_else(|_| serde_json::from_str(&text))?;
    if let Some(t) = task {
        if sample.task.is_some_and(|s| s != t) {
            return Err(Error::Config(format!("case is a {} case, not {t}", sample.task.unwrap())));
        }
        sample.task = Some(t);
    }
    if sample.task.is_none() {
        return Err(Error::Config("case has no task".into()));
    }
    Ok(sample)
}

/// Frames as one text row per image row, frames separated by blank lines.
pub fn frames_text(grid: crate::sequence::Grid3, colors: &[u8]) -> String {
    let mut s = String::new();
    for t in 0..grid.t {
        for h in 0..grid.h {
            for w in 0..grid.w {
                s.push(char::from(b'0' + colors[(t * grid.h + h) * grid.w + w]));
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

fn write_frames(out: &Path, grid: crate::sequence::Grid3, colors: &[u8]) -> Result<()> {
    let t = crate::numerics::Tensor::new(vec![colors.len(), CHANNELS], color_features(colors))?;
    save_tensor(&out.join("frames.prtf"), &t)?;
    std::fs::write(out.join("frames.txt"), frames_text(grid, colors))?;
    Ok(())
}

fn target_grid(cfg: &Config, s: &Sample) -> crate::sequence::Grid3 {
    let task = s.task.expect("checked on load");
    s.target.as_ref().map_or_else(|| cfg.data.cases.grid_for(task), |t| t.grid)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, stage, cases } => {
            let cfg = load_config(&common)?;
            let m = gen_data(&cfg, stage, cases, &common.out, default_workers())?;
            for (k, v) in &m.counts {
                println!("{k} {v}");
            }
        }
        Command::Train { common, stage, resume } => {
            let cfg = load_config(&common)?;
            let stages = if stage.eq_ignore_ascii_case("all") {
                Stage::ALL.to_vec()
            } else {
                vec![stage.parse()?]
            };
            std::fs::create_dir_all(&common.out)?;
            for s in stages {
                let mut sys = System::new(&cfg.model, cfg.seed)?;
                let report = train_stage(&mut sys, &cfg, s, &common.out, resume, |l| {
                    println!(
                        "stage {s} step {} phase {} total {:.5} ntp {} visual {} dit {} t {:.1}s",
                        l.step,
                        l.phase,
                        l.total,
                        l.ntp.map_or("-".into(), |v| format!("{v:.5}")),
                        l.visual.map_or("-".into(), |v| format!("{v:.5}")),
                        l.dit.map_or("-".into(), |v| format!("{v:.5}")),
                        l.seconds
                    );
                })?;
                println!("stage {s} done: {} steps in {:.1}s -> {}", report.steps, report.seconds, stage_path(&common.out, s).display());
            }
        }
        Command::Plan { common, model, case } => {
            let cfg = load_config(&common)?;
            let (sys, store) = load_model(&cfg, &model)?;
            let sample = load_case(&case, None)?;
            let mut sources = Vec::new();
            for s in [&sample.source, &sample.reference].into_iter().flatten() {
                sources.push((token_grid(s.grid)?, sys.vit.embed_scene(s)?));
            }
            let grid = token_grid(target_grid(&cfg, &sample))?;
            let input = planning_input(&sample.instruction, &sources, grid, sys.vit.embed_dim())?;
            let rng = Rng::new(cfg.seed);
            let p = plan(&sys.planner, &sys.decoder, &store, &input, &cfg.inference.plan, &mut rng.fork(0))?;
            std::fs::create_dir_all(&common.out)?;
            save_tensor(&common.out.join("hidden.prtf"), &p.hidden)?;
            save_tensor(&common.out.join("embeddings.prtf"), &p.embeddings)?;
            std::fs::write(common.out.join("plan.json"), serde_json::to_string_pretty(&p.steps)?)?;
            println!("masked trace {:?}", p.masked_trace());
        }
        Command::Render { common, model, case, plan } => {
            let cfg = load_config(&common)?;
            let (sys, store) = load_model(&cfg, &model)?;
            let sample = load_case(&case, None)?;
            let task = sample.task.expect("checked on load");
            let grid = target_grid(&cfg, &sample);
            let inputs = RenderInputs {
                text: Some(sample.instruction.clone()),
                plan: Some(load_tensor(&plan)?),
                source: sample.source.as_ref().map(|s| sys.vae.encode_scene(s)),
                reference: sample.reference.as_ref().map(|s| sys.vae.encode_scene(s)),
            };
            let steps = cfg.inference.render_steps.unwrap_or(cfg.guidance.row(task).steps);
            let rng = Rng::new(cfg.seed);
            let latent = render(
                &sys.renderer,
                &store,
                &inputs,
                grid,
                steps,
                &cfg.guidance.spec(task)?,
                cfg.inference.shift,
                &mut rng.fork(1),
                &NoPostCompose,
            )?;
            std::fs::create_dir_all(&common.out)?;
            write_frames(&common.out, grid, &sys.vae.decode_colors(&latent))?;
        }
        Command::Edit { common, model, case, task } => {
            let cfg = load_config(&common)?;
            let (sys, store) = load_model(&cfg, &model)?;
            let sample = load_case(&case, task)?;
            let out = sys.edit(&store, &cfg, &sample, &mut Rng::new(cfg.seed))?;
            std::fs::create_dir_all(&common.out)?;
            let grid = out.latent.grid;
            write_frames(&common.out, grid, &out.colors)?;
            let mut report = serde_json::json!({
                "task": sample.task,
                "instruction": vocab::render(&sample.instruction),
                "seed": cfg.seed,
                "masked_trace": out.plan.masked_trace(),
            });
            if let (Some(target), Some(_)) = (&sample.target, &sample.source) {
                let baseline = sample.source.as_ref().expect("checked").frames();
                let oracle = crate::toydata::Oracle {
                    grid,
                    background: target.background,
                    baseline,
                    expected: target.frames(),
                };
                report["oracle"] = serde_json::to_value(oracle.score(&out.colors)?)?;
            }
            std::fs::write(common.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            print!("{}", frames_text(grid, &out.colors));
        }
        Command::Eval {
            common,
            model,
            cases,
            workers,
            with_invariants,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = cases {
                cfg.eval.cases = n;
            }
            if model.raw {
                cfg.inference.use_ema = false;
            }
            let (sys, store) = load_model(&cfg, &model)?;
            let set = eval_cases(&cfg, cfg.seed)?;
            let mut report = evaluate(&sys, &store, &cfg, &set, cfg.seed, workers.unwrap_or_else(default_workers))?;
            if with_invariants {
                report.invariants_passed = Some(run_invariants(|_| {}).iter().all(|c| c.passed));
            }
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("report.txt"), report.to_text())?;
            std::fs::write(common.out.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
            print!("{}", report.to_text());
        }
        Command::Check { common } => {
            let _ = load_config(&common)?;
            let results = run_invariants(|c| println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
            let failed = results.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} invariant checks failed")));
            }
        }
    }
    Ok(())
}
