//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use planrender::guidance::{compose, compose_dual_branch, BranchWeights, DualBranchSpec, DualForwards, GuidanceSpec};
use planrender::harness::checkpoint::copy_params;
use planrender::harness::config::Stage;
use planrender::harness::eval::default_workers;
use planrender::harness::mixture::MixtureEntry;
use planrender::harness::system::{draw_sample, pair_pool};
use planrender::harness::train::{example_step, run_stage, stage_path, train_stage, TrainState};
use planrender::harness::{eval_cases, evaluate, Checkpoint, Config, System};
use planrender::numerics::fdcheck::{check_gradients_where, FdOptions};
use planrender::numerics::{ParamStore, Rng, Tensor};
use planrender::planner::{plan, planning_input, PlanOptions, RevealOrder};
use planrender::posenc::{apply_rope, PhaseTable, PosEncoding, RopeConfig};
use planrender::renderer::{patch_dim, Conditioning, ForwardOptions, RendererConfig, RendererModel, SourceSegment};
use planrender::schedules::{
    inference_mask_ratio, masked_count_trace, sample_mask_ratio, sample_noise_level, timestep_density_logit_normal,
    timestep_map_mode, MaskRatioConfig, TaskKind, Weighting,
};
use planrender::sequence::{Grid3, Pos3};
use planrender::toydata::{vocab, CHANNELS};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < budget, format!("took {took:.1?}, budget {budget:?}"))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// 1. Guidance algebra.

fn guidance() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let mut present = [0, 1, 2, 3].map(|_| rng.bernoulli(0.5));
        present[i % 4] = true;
        let spec = GuidanceSpec::new(present, [1.0; 4]).map_err(err)?;
        let forwards: BTreeMap<_, Tensor<f64>> = spec
            .required_subsets()
            .into_iter()
            .map(|k| (k, rng.normal_tensor::<f64>(&[4, 6]).scale(10.0)))
            .collect();
        let out = compose(&spec, &forwards).map_err(err)?;
        let full = &forwards[&spec.full_set()];
        worst = worst.max(out.max_abs_diff(full));
    }
    ensure(worst <= 1e-12, format!("unit compose deviates by {worst:.3e}"))?;

    let mut specs = 0;
    for _ in 0..1000 {
        let mut branch = || {
            let (text, visual) = (rng.normal() * 3.0, rng.normal() * 3.0);
            BranchWeights {
                full: 1.0 + text + visual,
                text,
                visual,
            }
        };
        let (image_branch, video_branch) = (branch(), branch());
        let alpha = rng.normal();
        let spec = DualBranchSpec {
            alpha,
            beta: 1.0 - alpha,
            image_branch,
            video_branch,
        };
        if !spec.validate().is_empty() {
            continue;
        }
        specs += 1;
        let x: Tensor<f64> = rng.normal_tensor(&[3, 5]);
        let f = DualForwards {
            image_full: x.clone(),
            image_no_text: x.clone(),
            image_no_visual: x.clone(),
            video_full: x.clone(),
            video_no_text: x.clone(),
            video_no_visual: x.clone(),
        };
        let out = compose_dual_branch(&spec, &f).map_err(err)?;
        ensure(out == x, format!("dual branch changed identical inputs under {spec:?}"))?;
    }
    ensure(specs >= 500, format!("only {specs} valid dual-branch specs drawn"))?;
    within(start, Duration::from_secs(5))?;
    Ok(format!(
        "unit compose max dev {worst:.1e} over 1000 maps; dual branch exact on {specs} specs"
    ))
}

// 2. Schedule identities.

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn schedules() -> Outcome {
    let start = Instant::now();
    let (a, b, c): (f64, f64, f64) = (
        timestep_map_mode(0.0, 1.29),
        timestep_map_mode(1.0, 1.29),
        timestep_map_mode(0.5, 1.29),
    );
    ensure(a == 1.0 && b == 0.0 && c == 0.5, format!("mode map gives {a}, {b}, {c}"))?;

    let std_normal = Normal::new(0.0, 1.0).map_err(err)?;
    let mut notes = Vec::new();
    for (case, (m, s)) in [(0.0, 1.0), (0.5, 1.0), (-0.8, 1.6)].into_iter().enumerate() {
        // Direct quadrature over t; the density vanishes fast at both ends.
        let density = |t: f64| {
            if t <= 0.0 || t >= 1.0 {
                0.0
            } else {
                timestep_density_logit_normal(t, m, s).unwrap_or(f64::NAN)
            }
        };
        let mass = simpson(density, 0.0, 1.0, 2_000_000);
        ensure((mass - 1.0).abs() < 1e-6, format!("density (m={m}, s={s}) integrates to {mass:.9}"))?;

        let bins = 20;
        let edges: Vec<f64> = (1..bins)
            .map(|k| {
                let z = std_normal.inverse_cdf(k as f64 / bins as f64);
                1.0 / (1.0 + (-(m + s * z)).exp())
            })
            .collect();
        let n = 100_000;
        let mut counts = vec![0usize; bins];
        let mut rng = Rng::new(202).fork(case as u64);
        for _ in 0..n {
            let t = sample_noise_level(Weighting::LogitNormal { m, s }, &mut rng);
            counts[edges.partition_point(|&e| e <= t)] += 1;
        }
        let expect = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).map_err(err)?.cdf(chi2);
        ensure(p > 0.001, format!("sampler histogram (m={m}, s={s}) chi2 {chi2:.1}, p {p:.2e}"))?;
        notes.push(format!("mass {mass:.8} p {p:.3}"));
    }

    for k_total in 1..=50 {
        let r: Vec<f64> = (0..k_total)
            .map(|k| inference_mask_ratio(k, k_total))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        ensure(r.windows(2).all(|w| w[1] < w[0]), format!("K={k_total} not strictly decreasing"))?;
        ensure(r[k_total - 1] == 0.0, format!("K={k_total} ends at {}", r[k_total - 1]))?;
    }
    within(start, Duration::from_secs(30))?;
    Ok(format!("mode endpoints exact; {}; cosine K 1..50 ok", notes.join(", ")))
}

// 3. Beta mask-ratio means.

fn beta_means() -> Outcome {
    let start = Instant::now();
    // (alpha, beta) per task from the mask-ratio table.
    let table = [
        (TaskKind::T2I, 5.0, 1.1),
        (TaskKind::T2V, 8.0, 1.05),
        (TaskKind::I2I, 8.0, 1.05),
        (TaskKind::I2V, 10.0, 1.0),
        (TaskKind::V2V, 12.0, 0.9),
        (TaskKind::IV2V, 12.0, 0.9),
    ];
    let cfg = MaskRatioConfig::default();
    let mut worst = 0.0f64;
    for (task, a, b) in table {
        let analytic = a / (a + b);
        let mut rng = Rng::new(303).fork(task.index() as u64);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_mask_ratio(&cfg, task, &mut rng)).sum::<f64>() / n as f64;
        let e = (mean - analytic).abs();
        ensure(e < 0.01, format!("{task}: empirical {mean:.4} vs {analytic:.4}"))?;
        worst = worst.max(e);
    }
    within(start, Duration::from_secs(30))?;
    Ok(format!("max |mean - a/(a+b)| = {worst:.4} at 1e5 draws per task"))
}

// 4. Segment-aware rotary encoding.

fn rotate(cfg: &RopeConfig, x: &Tensor<f64>, positions: &[Pos3], segment: usize) -> Result<Tensor<f64>, String> {
    let table = PhaseTable::for_positions(cfg, positions, segment).map_err(err)?;
    apply_rope(x, &table).map_err(err)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain 3D rotation written out from the axis split and per-axis frequencies.
fn plain_rope_oracle(head_dim: usize, base: f64, x: &[f64], p: Pos3) -> Vec<f64> {
    let pairs = head_dim / 2;
    let hw = (3 * head_dim / 16).min(pairs / 2);
    let split = [pairs - 2 * hw, hw, hw];
    let coord = [p.t as f64, p.h as f64, p.w as f64];
    let mut angles = Vec::new();
    for axis in 0..3 {
        let d = split[axis] as f64;
        for j in 0..split[axis] {
            angles.push(coord[axis] * base.powf(-(j as f64) / d));
        }
    }
    let mut out = x.to_vec();
    for (j, th) in angles.into_iter().enumerate() {
        let (a, b) = (x[2 * j], x[2 * j + 1]);
        out[2 * j] = a * th.cos() - b * th.sin();
        out[2 * j + 1] = a * th.sin() + b * th.cos();
    }
    out
}

fn perturb(store: &mut ParamStore<f64>, rng: &mut Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let n = rng.normal_tensor::<f64>(&shape).scale(scale);
        store.get_mut(id).axpy(1.0, &n).expect("same shape");
    }
}

fn swap_gap(pos: PosEncoding) -> Result<f64, String> {
    let cfg = RendererConfig {
        pos_encoding: pos,
        ..RendererConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = Rng::new(404);
    let model = RendererModel::new(cfg, &mut store, &mut rng, "r").map_err(err)?;
    perturb(&mut store, &mut rng, 0.3);
    let grid = Grid3::new(1, 2, 2);
    let pd = patch_dim(CHANNELS);
    let x: Tensor<f64> = rng.normal_tensor(&[grid.count(), pd]);
    let a: Tensor<f64> = rng.normal_tensor(&[grid.count(), pd]);
    let b: Tensor<f64> = rng.normal_tensor(&[grid.count(), pd]);
    let seg = |i, tokens: &Tensor<f64>| SourceSegment {
        segment_index: i,
        grid,
        tokens: tokens.clone(),
    };
    let cond = Conditioning {
        text: Some(vec![vocab::BOS, vocab::EOS]),
        plan: None,
    };
    let run = |s: &[SourceSegment]| model.predict(&store, &x, grid, 0.4, &cond, s, ForwardOptions::default());
    let ab = run(&[seg(1, &a), seg(2, &b)]).map_err(err)?;
    let ba = run(&[seg(1, &b), seg(2, &a)]).map_err(err)?;
    Ok(ab.max_abs_diff(&ba))
}

fn rope() -> Outcome {
    let start = Instant::now();
    let hd = 32;
    let cfg = RopeConfig::new(hd);
    let mut rng = Rng::new(405);
    let positions: Vec<Pos3> = (0..40)
        .map(|i| Pos3 {
            t: i % 4,
            h: (i / 4) % 5,
            w: i / 20 + 3,
        })
        .collect();
    let x: Tensor<f64> = rng.normal_tensor(&[positions.len(), hd]);
    let mut norm_dev = 0.0f64;
    for seg in 0..4 {
        let y = rotate(&cfg, &x, &positions, seg)?;
        for r in 0..x.rows() {
            norm_dev = norm_dev.max((dot(x.row(r), x.row(r)).sqrt() - dot(y.row(r), y.row(r)).sqrt()).abs());
        }
    }
    ensure(norm_dev <= 1e-12, format!("norm drift {norm_dev:.3e}"))?;

    let mut offset_dev = 0.0f64;
    for _ in 0..200 {
        let q: Tensor<f64> = rng.normal_tensor(&[1, hd]);
        let k: Tensor<f64> = rng.normal_tensor(&[1, hd]);
        let seg = rng.below(3);
        let p = |rng: &mut Rng| Pos3 {
            t: rng.below(6),
            h: rng.below(8),
            w: rng.below(8),
        };
        let (pq, pk) = (p(&mut rng), p(&mut rng));
        let d = p(&mut rng);
        let shift = |a: Pos3| Pos3 {
            t: a.t + d.t,
            h: a.h + d.h,
            w: a.w + d.w,
        };
        let l0 = dot(rotate(&cfg, &q, &[pq], seg)?.row(0), rotate(&cfg, &k, &[pk], seg)?.row(0));
        let l1 = dot(
            rotate(&cfg, &q, &[shift(pq)], seg)?.row(0),
            rotate(&cfg, &k, &[shift(pk)], seg)?.row(0),
        );
        offset_dev = offset_dev.max((l0 - l1).abs());
    }
    ensure(offset_dev <= 1e-10, format!("relative-offset invariance off by {offset_dev:.3e}"))?;

    // Per-pair phase: rotate a unit vector on pair j and read its angle.
    let mut phase_dev = 0.0f64;
    let p = Pos3 { t: 1, h: 2, w: 3 };
    for (i, i2) in [(1usize, 0usize), (2, 1), (3, 1), (2, 0)] {
        for j in 0..hd / 2 {
            let mut e = Tensor::zeros(&[1, hd]);
            e.data_mut()[2 * j] = 1.0;
            let ya = rotate(&cfg, &e, &[p], i)?;
            let yb = rotate(&cfg, &e, &[p], i2)?;
            let ang = |y: &Tensor<f64>| y.row(0)[2 * j + 1].atan2(y.row(0)[2 * j]);
            let expect = (i as f64 - i2 as f64) * cfg.segment_base.powf(-(2.0 * j as f64) / hd as f64);
            let diff = ang(&ya) - ang(&yb) - expect;
            let wrapped = diff - (diff / std::f64::consts::TAU).round() * std::f64::consts::TAU;
            phase_dev = phase_dev.max(wrapped.abs());
        }
    }
    ensure(phase_dev <= 1e-10, format!("segment phase difference off by {phase_dev:.3e}"))?;

    let y0 = rotate(&cfg, &x, &positions, 0)?;
    let mut reduce_dev = 0.0f64;
    for (r, &p) in positions.iter().enumerate() {
        let o = plain_rope_oracle(hd, cfg.base, x.row(r), p);
        for (a, b) in o.iter().zip(y0.row(r)) {
            reduce_dev = reduce_dev.max((a - b).abs());
        }
    }
    ensure(reduce_dev <= 1e-12, format!("segment 0 differs from plain 3D RoPE by {reduce_dev:.3e}"))?;

    let plain = swap_gap(PosEncoding::Rope3d)?;
    let aware = swap_gap(PosEncoding::SegmentRope3d)?;
    ensure(plain <= 1e-10, format!("swap visible under plain 3D RoPE ({plain:.3e})"))?;
    ensure(aware >= 1e-6, format!("swap invisible under segment-aware RoPE ({aware:.3e})"))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "norm {norm_dev:.1e}, offset {offset_dev:.1e}, phase {phase_dev:.1e}, seg0 {reduce_dev:.1e}; swap gap plain {plain:.1e} vs aware {aware:.2e}"
    ))
}

// 5. Gradient integrity.

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut cfg = Config::default();
    cfg.model.planner.dim = 32;
    cfg.model.planner.blocks = 2;
    cfg.model.renderer.dim = 32;
    cfg.model.renderer.blocks = 2;
    cfg.model.renderer.planner_dim = 32;
    cfg.model.decoder.blocks = 2;
    let mut sys = System::new(&cfg.model, 505).map_err(err)?;
    let mut rng = Rng::new(506);
    perturb(&mut sys.store, &mut rng, 0.05);
    let pairs = pair_pool(&cfg.data, &mut rng).map_err(err)?;
    let entries = [
        MixtureEntry::Task(TaskKind::T2I),
        MixtureEntry::Task(TaskKind::T2V),
        MixtureEntry::Task(TaskKind::I2I),
        MixtureEntry::Task(TaskKind::I2V),
        MixtureEntry::Task(TaskKind::V2V),
        MixtureEntry::Task(TaskKind::IV2V),
        MixtureEntry::VideoPair,
        MixtureEntry::Text,
    ];
    // Whole-model losses are O(1), so a 1e-5 step is roundoff-limited on
    // coordinates whose gradient is near 1e-7.
    let opts = FdOptions {
        step: 1e-4,
        max_per_param: Some(12),
        ..FdOptions::default()
    };
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for stage in [Stage::I, Stage::II] {
        let sc = cfg.stage(stage).map_err(err)?.clone();
        let prefixes = stage.trainable_prefixes();
        for (k, &entry) in entries.iter().enumerate() {
            if stage == Stage::II && entry == MixtureEntry::Text {
                continue;
            }
            let mut srng = Rng::new(507).fork_path(&[stage.index(), k as u64]);
            let sample = draw_sample(entry, &cfg.data, None, &pairs, &mut srng).map_err(err)?;
            let prep = sys.prepare(&sample).map_err(err)?;
            let step_rng = srng.fork(1);
            let (parts, grads) =
                example_step(&sys, &sys.store, &cfg, &sc, &prep, &mut step_rng.clone()).map_err(err)?;
            let grads = grads.ok_or_else(|| format!("stage {stage} {} produced no loss", entry.name()))?;
            let mut store = sys.store.clone();
            let report = check_gradients_where(
                &mut store,
                &grads,
                opts,
                |n| prefixes.iter().any(|p| n.starts_with(p)),
                |s| {
                    example_step(&sys, s, &cfg, &sc, &prep, &mut step_rng.clone())
                        .map(|r| r.0.total)
                        .unwrap_or(f64::NAN)
                },
            );
            checked += report.checked;
            if report.max_rel_err > worst.0 || worst.1.is_empty() {
                let w = report.worst.as_ref().map(|w| w.param.clone()).unwrap_or_default();
                worst = (
                    report.max_rel_err,
                    format!("stage {stage} {} ({w}, loss {:.4})", entry.name(), parts.total),
                );
            }
        }
    }
    ensure(worst.0 < 1e-4, format!("max relative error {:.3e} at {}", worst.0, worst.1))?;
    within(start, Duration::from_secs(300))?;
    Ok(format!("{checked} coordinates, max relative error {:.2e} ({})", worst.0, worst.1))
}

// 6. Determinism and checkpointing.

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_planrender")
}

fn tiny_config(steps: usize) -> String {
    let stage = |name: &str, lambdas: &str, mixture: &str| {
        format!(
            "[[stages]]\nstage = \"{name}\"\nlr = 1e-3\nbatch = 2\nlambdas = {lambdas}\n[[stages.phases]]\nsteps = {steps}\nema_decay = 0.99\nmixture = {mixture}\n\n"
        )
    };
    format!(
        "seed = 9\n[inference]\nrender_steps = 4\n[inference.plan]\nsteps = 4\ndecoder_steps = 2\n\n{}{}{}",
        stage("I", "{ text = 0.2, visual = 1.0, dit = 0.0 }", "{ v2v = 50, t2v = 20, video_pair = 10, text = 20 }"),
        stage("II", "{ text = 0.0, visual = 0.0, dit = 1.0 }", "{ v2v = 50, iv2v = 20, i2v = 10, video_pair = 20 }"),
        stage("III", "{ text = 0.2, visual = 1.0, dit = 1.0 }", "{ v2v = 60, i2i = 20, text = 20 }"),
    )
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(bin()).args(args).output().map_err(err)?;
    ensure(
        out.status.success(),
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)),
    )?;
    Ok(out.stdout)
}

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for e in std::fs::read_dir(dir).map_err(err)? {
        let e = e.map_err(err)?;
        files.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).map_err(err)?);
    }
    Ok(files)
}

fn checkpoint_bytes(state: &TrainState, cfg: &Config, store: &ParamStore<f64>) -> Result<Vec<u8>, String> {
    let mut buf = Vec::new();
    state.checkpoint(cfg, store).map_err(err)?.write(&mut buf).map_err(err)?;
    Ok(buf)
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let cfg_path = root.join("tiny.toml");
    std::fs::write(&cfg_path, tiny_config(100)).map_err(err)?;
    let cfg = Config::load(&cfg_path).map_err(err)?;

    // Split resume through an on-disk checkpoint, for every stage.
    for stage in Stage::ALL {
        let mut sys = System::new(&cfg.model, cfg.seed).map_err(err)?;
        let mut full = TrainState::fresh(&cfg, stage, &sys.store).map_err(err)?;
        run_stage(&mut sys, &cfg, &mut full, 100, |_, _, _| Ok(())).map_err(err)?;
        let a = checkpoint_bytes(&full, &cfg, &sys.store)?;

        let mut sys1 = System::new(&cfg.model, cfg.seed).map_err(err)?;
        let mut first = TrainState::fresh(&cfg, stage, &sys1.store).map_err(err)?;
        run_stage(&mut sys1, &cfg, &mut first, 37, |_, _, _| Ok(())).map_err(err)?;
        let path = root.join(format!("split-{}.prck", stage.name()));
        first.checkpoint(&cfg, &sys1.store).map_err(err)?.save(&path).map_err(err)?;
        drop(sys1);
        let ck = Checkpoint::load(&path).map_err(err)?;
        let mut sys2 = System::new(&cfg.model, cfg.seed).map_err(err)?;
        let mut second = TrainState::restore(&ck, &cfg, &mut sys2.store).map_err(err)?;
        run_stage(&mut sys2, &cfg, &mut second, 100, |_, _, _| Ok(())).map_err(err)?;
        let b = checkpoint_bytes(&second, &cfg, &sys2.store)?;
        ensure(a == b, format!("stage {stage}: 37+63 split differs from 100 uninterrupted steps"))?;
    }

    // End-to-end edit replay through the command line.
    let c = cfg_path.to_str().ok_or("non-utf8 path")?;
    let out = root.join("run");
    let o = out.to_str().ok_or("non-utf8 path")?;
    std::fs::write(&cfg_path, tiny_config(10)).map_err(err)?;
    run_cli(&["train", "--config", c, "--out", o])?;
    let case = root.join("case.json");
    let cases = eval_cases(&Config::load(&cfg_path).map_err(err)?, 77).map_err(err)?;
    std::fs::write(&case, serde_json::to_string(&cases[0]).map_err(err)?).map_err(err)?;
    let ck = stage_path(&out, Stage::III);
    let mut runs = Vec::new();
    for k in 0..2 {
        let dir = root.join(format!("edit{k}"));
        let stdout = run_cli(&[
            "edit",
            "--config",
            c,
            "--out",
            dir.to_str().ok_or("non-utf8 path")?,
            "--checkpoint",
            ck.to_str().ok_or("non-utf8 path")?,
            "--case",
            case.to_str().ok_or("non-utf8 path")?,
        ])?;
        runs.push((stdout, dir_bytes(&dir)?));
    }
    ensure(!runs[0].1.is_empty(), "edit wrote no files")?;
    ensure(runs[0] == runs[1], "edit replay differs between runs")?;
    within(start, Duration::from_secs(300))?;
    Ok(format!(
        "split resume bit-exact over 100 steps in stages I-III; edit replay identical ({} files)",
        runs[0].1.len()
    ))
}

// 7. Toy end-to-end learning.

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn learning() -> Outcome {
    let start = Instant::now();
    let cfg = Config::load(&config_dir().join("acceptance.toml")).map_err(err)?;
    let g = cfg.data.cases.grid;
    ensure(g.t <= 8 && g.h <= 16 && g.w <= 16, format!("grid {g:?} too large"))?;
    let m = &cfg.model;
    ensure(
        m.planner.blocks <= 4 && m.renderer.blocks <= 4 && m.decoder.blocks <= 4,
        "models exceed 4 blocks",
    )?;
    for s in &cfg.stages {
        ensure(s.total_steps() * s.batch >= 2000, format!("stage {} draws fewer than 2000 cases", s.stage))?;
    }
    ensure(cfg.eval.tasks == [TaskKind::V2V], "held-out set must be V2V")?;

    let tmp = tempfile::tempdir().map_err(err)?;
    let mut sys = System::new(&cfg.model, cfg.seed).map_err(err)?;
    let untrained = sys.store.clone();
    for stage in Stage::ALL {
        let r = train_stage(&mut sys, &cfg, stage, tmp.path(), false, |log| {
            eprintln!(
                "  stage {stage} step {} total {:.4} ({:.0?})",
                log.step,
                log.total,
                start.elapsed()
            );
        })
        .map_err(err)?;
        eprintln!("  stage {stage} finished {} steps", r.steps);
    }
    let ck = Checkpoint::load(&stage_path(tmp.path(), Stage::III)).map_err(err)?;
    copy_params(&mut sys.store, &ck.store).map_err(err)?;
    let trained = ck.ema.apply_to(&sys.store);

    let cases = eval_cases(&cfg, cfg.seed).map_err(err)?;
    ensure(cases.len() == 200, format!("{} held-out cases", cases.len()))?;
    let workers = default_workers();
    let model = evaluate(&sys, &trained, &cfg, &cases, cfg.seed, workers).map_err(err)?;
    let base = evaluate(&sys, &untrained, &cfg, &cases, cfg.seed, workers).map_err(err)?;
    let (mo, bo) = (model.overall, base.overall);
    ensure(mo.success_rate >= 0.80, format!("edit success {:.3} < 0.80", mo.success_rate))?;
    ensure(
        mo.untouched_exactness >= 0.90,
        format!("untouched exactness {:.4} < 0.90", mo.untouched_exactness)
    )?;
    // Chance: random palette output scored by the same oracles. The
    // untrained model must sit within three binomial standard errors of it.
    let n = cases.len() as f64;
    let chance = bo.baseline_success_rate;
    let slack = 3.0 * (chance.max(1.0 / n) * (1.0 - chance).max(1.0 / n) / n).sqrt() + 1.0 / n;
    ensure(
        (bo.success_rate - chance).abs() <= slack,
        format!("untrained success {:.3} vs chance {chance:.3}", bo.success_rate),
    )?;
    within(start, Duration::from_secs(45 * 60))?;
    Ok(format!(
        "success {:.3}, untouched {:.4}; untrained success {:.3}, untouched {:.4}; chance success {chance:.3}, untouched {:.4}; {:.0?}",
        mo.success_rate,
        mo.untouched_exactness,
        bo.success_rate,
        bo.untouched_exactness,
        bo.baseline_untouched_exactness,
        start.elapsed()
    ))
}

// 8. Planner schedule conformance.

fn planner_schedule() -> Outcome {
    let start = Instant::now();
    let expected = |k_total: usize, m: usize| -> Vec<usize> {
        (0..k_total)
            .map(|k| {
                let c = (std::f64::consts::FRAC_PI_2 * (k + 1) as f64 / k_total as f64).cos();
                (c * m as f64).round() as usize
            })
            .collect()
    };
    for k_total in 1..=50 {
        for m in 1..=64 {
            let trace = masked_count_trace(k_total, m).map_err(err)?;
            let want = expected(k_total, m);
            ensure(trace == want, format!("K={k_total} M={m}: {trace:?} != {want:?}"))?;
            ensure(trace.windows(2).all(|w| w[1] <= w[0]), format!("K={k_total} M={m} increases"))?;
            ensure(trace.last() == Some(&0), format!("K={k_total} M={m} does not end at 0"))?;
        }
    }
    ensure(expected(25, 64)[..3] == masked_count_trace(25, 64).map_err(err)?[..3], "default K")?;

    // The planner's own inference loop follows the same counts.
    let cfg = Config::default();
    let sys = System::new(&cfg.model, 808).map_err(err)?;
    let text = [vocab::BOS, vocab::EOS];
    let mut runs = 0;
    for k_total in [1, 2, 3, 7, 25, 50] {
        for m in [1, 2, 5, 16, 33, 64] {
            let input = planning_input(&text, &[], Grid3::new(1, 1, m), sys.vit.embed_dim()).map_err(err)?;
            let opts = PlanOptions {
                steps: k_total,
                decoder_steps: 1,
                reveal: if runs % 2 == 0 { RevealOrder::Confidence } else { RevealOrder::Random },
                ..PlanOptions::default()
            };
            let r = plan(&sys.planner, &sys.decoder, &sys.store, &input, &opts, &mut Rng::new(809)).map_err(err)?;
            let want = expected(k_total, m);
            ensure(r.masked_trace() == want, format!("plan K={k_total} M={m}: {:?}", r.masked_trace()))?;
            runs += 1;
        }
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!("3200 (K, M) traces match; {runs} planner runs follow them"))
}

fn main() {
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [Criterion; 8] = [
        ("guidance_algebra", guidance),
        ("schedule_identities", schedules),
        ("beta_mask_ratio_means", beta_means),
        ("segment_aware_rope", rope),
        ("gradient_integrity", gradients),
        ("determinism_and_checkpointing", determinism),
        ("toy_end_to_end_learning", learning),
        ("planner_schedule_conformance", planner_schedule),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {} {name} ({took:.1?}): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name} ({took:.1?}): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
