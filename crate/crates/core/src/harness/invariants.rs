//! Fast self-checks run by `check` and `eval --with-invariants`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::guidance::{compose, compose_dual_branch, BranchWeights, DualBranchSpec, DualForwards, GuidanceSpec};
use crate::numerics::{Rng, Tensor};
use crate::posenc::{apply_rope, PhaseTable, RopeConfig};
use crate::schedules::{
    inference_mask_ratio, masked_count_trace, sample_mask_ratio, timestep_density_logit_normal, timestep_map_mode,
    MaskRatioConfig, TaskKind,
};
use crate::sequence::Pos3;
use crate::toydata::{gen_edit_case_family, CaseConfig, EditFamily};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

fn guidance_unit() -> CheckResult {
    let mut rng = Rng::new(11);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let present = [0, 1, 2, 3].map(|b| (i >> b) & 1 == 1 || b == 2);
        let spec = GuidanceSpec {
            present,
            weights: [1.0; 4],
        };
        let forwards: BTreeMap<_, Tensor<f64>> = spec
            .required_subsets()
            .into_iter()
            .map(|k| (k, rng.normal_tensor(&[3, 4])))
            .collect();
        let out = match compose(&spec, &forwards) {
            Ok(t) => t,
            Err(e) => return result("guidance_unit_weights", false, e.to_string()),
        };
        worst = worst.max(out.max_abs_diff(&forwards[&spec.full_set()]));
    }
    result("guidance_unit_weights", worst <= 1e-12, format!("max deviation {worst:.2e}"))
}

fn dual_branch_identity() -> CheckResult {
    let mut rng = Rng::new(12);
    for _ in 0..200 {
        let branch = |rng: &mut Rng| {
            let (text, visual) = (4.0 * rng.uniform() - 1.0, 4.0 * rng.uniform() - 1.0);
            BranchWeights {
                full: 1.0 + text + visual,
                text,
                visual,
            }
        };
        let alpha = 2.0 * rng.uniform() - 0.5;
        let spec = DualBranchSpec {
            alpha,
            beta: 1.0 - alpha,
            image_branch: branch(&mut rng),
            video_branch: branch(&mut rng),
        };
        if !spec.validate().is_empty() {
            continue;
        }
        let x: Tensor<f64> = rng.normal_tensor(&[2, 5]);
        let f = DualForwards {
            image_full: x.clone(),
            image_no_text: x.clone(),
            image_no_visual: x.clone(),
            video_full: x.clone(),
            video_no_text: x.clone(),
            video_no_visual: x.clone(),
        };
        match compose_dual_branch(&spec, &f) {
            Ok(out) if out == x => {}
            Ok(out) => {
                return result(
                    "dual_branch_identity",
                    false,
                    format!("deviation {:.2e}", out.max_abs_diff(&x)),
                )
            }
            Err(e) => return result("dual_branch_identity", false, e.to_string()),
        }
    }
    result("dual_branch_identity", true, "exact on 200 specs".into())
}

fn mode_map() -> CheckResult {
    let a: f64 = timestep_map_mode(0.0, 1.29);
    let b: f64 = timestep_map_mode(1.0, 1.29);
    let c: f64 = timestep_map_mode(0.5, 1.29);
    result(
        "mode_map_endpoints",
        a == 1.0 && b == 0.0 && c == 0.5,
        format!("f(0)={a} f(1)={b} f(0.5)={c}"),
    )
}

fn logit_normal_mass() -> CheckResult {
    // Simpson's rule after substituting t = sigmoid(x), which keeps the
    // integrand smooth near both ends.
    let (lo, hi, n) = (-30.0f64, 30.0f64, 60_000usize);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let t = 1.0 / (1.0 + (-x).exp());
        let dt = t * (1.0 - t);
        if dt <= 0.0 || t <= 0.0 || t >= 1.0 {
            return 0.0;
        }
        timestep_density_logit_normal(t, 0.0, 1.0).unwrap_or(0.0) * dt
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let mass = s * h / 3.0;
    result("logit_normal_mass", (mass - 1.0).abs() < 1e-6, format!("mass {mass:.9}"))
}

fn cosine_schedule() -> CheckResult {
    for k_total in 1..=50 {
        let r: Vec<f64> = (0..k_total).map(|k| inference_mask_ratio(k, k_total).unwrap_or(f64::NAN)).collect();
        let decreasing = r.windows(2).all(|w| w[1] < w[0]);
        if !decreasing || r[k_total - 1] != 0.0 {
            return result("cosine_mask_schedule", false, format!("K={k_total}: {r:?}"));
        }
    }
    result("cosine_mask_schedule", true, "K in 1..50".into())
}

fn beta_means() -> CheckResult {
    let cfg = MaskRatioConfig::default();
    let mut worst = (0.0f64, TaskKind::T2I);
    for task in TaskKind::ALL {
        let mut rng = Rng::new(13).fork(task.index() as u64);
        let n = 20_000;
        let mean = (0..n).map(|_| sample_mask_ratio(&cfg, task, &mut rng)).sum::<f64>() / n as f64;
        let err = (mean - cfg.get(task).mean()).abs();
        if err > worst.0 {
            worst = (err, task);
        }
    }
    result(
        "beta_mask_ratio_means",
        worst.0 < 0.01,
        format!("max error {:.4} ({})", worst.0, worst.1),
    )
}

fn rope() -> CheckResult {
    let cfg = RopeConfig::new(16);
    let mut rng = Rng::new(14);
    let positions: Vec<Pos3> = (0..12)
        .map(|i| Pos3 {
            t: i % 2,
            h: (i / 2) % 3,
            w: i / 6,
        })
        .collect();
    let x: Tensor<f64> = rng.normal_tensor(&[positions.len(), 16]);
    let mut worst_norm = 0.0f64;
    let mut phase_ok = true;
    for seg in 0..3 {
        let table = match PhaseTable::for_positions(&cfg, &positions, seg) {
            Ok(t) => t,
            Err(e) => return result("rope", false, e.to_string()),
        };
        let y = match apply_rope(&x, &table) {
            Ok(y) => y,
            Err(e) => return result("rope", false, e.to_string()),
        };
        for r in 0..x.rows() {
            let n0: f64 = x.row(r).iter().map(|v| v * v).sum();
            let n1: f64 = y.row(r).iter().map(|v| v * v).sum();
            worst_norm = worst_norm.max((n0.sqrt() - n1.sqrt()).abs());
        }
        for (j, a) in cfg.segment_angles(seg).into_iter().enumerate() {
            let expect = seg as f64 * cfg.segment_base.powf(-(2.0 * j as f64) / 16.0);
            phase_ok &= a == expect;
        }
    }
    phase_ok &= cfg.segment_angles(0).iter().all(|&a| a == 0.0);
    result(
        "rope",
        worst_norm < 1e-12 && phase_ok,
        format!("norm drift {worst_norm:.2e}, segment phases exact: {phase_ok}"),
    )
}

fn planner_trace() -> CheckResult {
    for k_total in 1..=50usize {
        for m in 1..=64usize {
            let trace = match masked_count_trace(k_total, m) {
                Ok(t) => t,
                Err(e) => return result("planner_trace", false, e.to_string()),
            };
            let expect: Vec<usize> = (0..k_total)
                .map(|k| {
                    let c = (std::f64::consts::FRAC_PI_2 * (k + 1) as f64 / k_total as f64).cos();
                    (c * m as f64).round().max(0.0) as usize
                })
                .collect();
            let ok = trace == expect && trace.windows(2).all(|w| w[1] <= w[0]) && trace.last() == Some(&0);
            if !ok {
                return result("planner_trace", false, format!("K={k_total} M={m}: {trace:?}"));
            }
        }
    }
    result("planner_trace", true, "K in 1..50, M in 1..64".into())
}

fn generator_oracles() -> CheckResult {
    let cfg = CaseConfig::default();
    let mut checked = 0;
    for task in TaskKind::ALL {
        for &family in EditFamily::for_task(task) {
            for i in 0..10 {
                let mut rng = Rng::new(15).fork_path(&[task.index() as u64, family as u64, i]);
                let case = match gen_edit_case_family(&mut rng, &cfg, task, family) {
                    Ok(c) => c,
                    Err(e) => return result("generator_oracles", false, e.to_string()),
                };
                let oracle = case.oracle();
                let truth = oracle.score(&case.target.frames()).map(|s| s.passed).unwrap_or(false);
                let unchanged = oracle.score(&oracle.baseline).map(|s| s.passed).unwrap_or(true);
                if !truth || unchanged {
                    return result("generator_oracles", false, case.describe());
                }
                checked += 1;
            }
        }
    }
    result("generator_oracles", true, format!("{checked} cases"))
}

/// Runs every check, reporting each one to `on_check` as it finishes.
pub fn run_invariants(mut on_check: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let checks: [fn() -> CheckResult; 9] = [
        guidance_unit,
        dual_branch_identity,
        mode_map,
        logit_normal_mass,
        cosine_schedule,
        beta_means,
        rope,
        planner_trace,
        generator_oracles,
    ];
    checks
        .into_iter()
        .map(|c| {
            let r = c();
            on_check(&r);
            r
        })
        .collect()
}
