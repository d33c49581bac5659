use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng};
use crate::schedules::TaskKind;
use crate::toydata::{gen_edit_case_family, EditCase, EditFamily, OracleScore, NUM_COLORS};

use super::config::Config;
use super::system::{Sample, System};

const EVAL_STREAM: u64 = 0x4556_414c;

/// Held-out cases cycling over the configured tasks and families. The
/// stream is disjoint from every training stream.
pub fn eval_cases(cfg: &Config, seed: u64) -> Result<Vec<EditCase>> {
    let mut combos = Vec::new();
    for &t in &cfg.eval.tasks {
        let allowed = EditFamily::for_task(t);
        let fams: Vec<EditFamily> = allowed.iter().copied().filter(|f| cfg.eval.families.contains(f)).collect();
        let fams = if fams.is_empty() { allowed.to_vec() } else { fams };
        combos.extend(fams.into_iter().map(|f| (t, f)));
    }
    if combos.is_empty() {
        return Err(Error::Config("evaluation needs at least one task".into()));
    }
    let rng = Rng::with_stream(seed, EVAL_STREAM);
    (0..cfg.eval.cases)
        .map(|i| {
            let (t, f) = combos[i % combos.len()];
            gen_edit_case_family(&mut rng.fork(i as u64), &cfg.data.cases, t, f)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub task: TaskKind,
    pub family: EditFamily,
    pub model: OracleScore,
    pub baseline: OracleScore,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub cases: usize,
    pub success_rate: f64,
    pub untouched_exactness: f64,
    pub baseline_success_rate: f64,
    pub baseline_untouched_exactness: f64,
}

impl GroupStats {
    fn of<'a>(results: impl Iterator<Item = &'a CaseResult>) -> Self {
        let mut s = Self::default();
        for r in results {
            s.cases += 1;
            s.success_rate += f64::from(u8::from(r.model.passed));
            s.untouched_exactness += r.model.untouched_agreement;
            s.baseline_success_rate += f64::from(u8::from(r.baseline.passed));
            s.baseline_untouched_exactness += r.baseline.untouched_agreement;
        }
        let n = s.cases.max(1) as f64;
        s.success_rate /= n;
        s.untouched_exactness /= n;
        s.baseline_success_rate /= n;
        s.baseline_untouched_exactness /= n;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub weights: String,
    pub overall: GroupStats,
    /// Keyed by `task/family`.
    pub groups: BTreeMap<String, GroupStats>,
    pub invariants_passed: Option<bool>,
    pub seconds: f64,
    pub mean_case_ms: f64,
    pub cases: Vec<CaseResult>,
}

impl EvalReport {
    /// One `name value` line per metric.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} {v}");
        };
        line("seed", self.seed.to_string());
        line("weights", self.weights.clone());
        line("cases", self.overall.cases.to_string());
        line("success_rate", format!("{:.4}", self.overall.success_rate));
        line("untouched_exactness", format!("{:.4}", self.overall.untouched_exactness));
        line("baseline_success_rate", format!("{:.4}", self.overall.baseline_success_rate));
        line(
            "baseline_untouched_exactness",
            format!("{:.4}", self.overall.baseline_untouched_exactness),
        );
        for (k, g) in &self.groups {
            line(&format!("{k}.cases"), g.cases.to_string());
            line(&format!("{k}.success_rate"), format!("{:.4}", g.success_rate));
            line(&format!("{k}.untouched_exactness"), format!("{:.4}", g.untouched_exactness));
        }
        if let Some(p) = self.invariants_passed {
            line("invariants_passed", p.to_string());
        }
        line("seconds", format!("{:.2}", self.seconds));
        line("mean_case_ms", format!("{:.1}", self.mean_case_ms));
        s
    }
}

/// Uniformly random palette colors, scored like a model output.
fn random_output(case: &EditCase, rng: &mut Rng) -> Vec<u8> {
    (0..case.target.grid.count()).map(|_| rng.below(NUM_COLORS) as u8).collect()
}

fn eval_case(sys: &System, store: &ParamStore<f64>, cfg: &Config, case: &EditCase, rng: &Rng) -> Result<CaseResult> {
    let oracle = case.oracle();
    let out = sys.edit(store, cfg, &Sample::from(case), &mut rng.fork(0))?;
    Ok(CaseResult {
        task: case.task,
        family: case.family,
        model: oracle.score(&out.colors)?,
        baseline: oracle.score(&random_output(case, &mut rng.fork(1)))?,
    })
}

/// Plans and renders every case with the configured inference settings and
/// scores the decoded output with the case oracle. Cases are spread over
/// `workers` threads; results do not depend on the worker count.
pub fn evaluate(
    sys: &System,
    store: &ParamStore<f64>,
    cfg: &Config,
    cases: &[EditCase],
    seed: u64,
    workers: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let rng = Rng::with_stream(seed, EVAL_STREAM + 1);
    let workers = workers.clamp(1, cases.len().max(1));
    let mut slots: Vec<Option<Result<CaseResult>>> = (0..cases.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunks: Vec<_> = slots.chunks_mut(cases.len().div_ceil(workers).max(1)).collect();
        let mut offset = 0;
        for chunk in chunks {
            let base = offset;
            offset += chunk.len();
            let rng = &rng;
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let i = base + k;
                    *slot = Some(eval_case(sys, store, cfg, &cases[i], &rng.fork(i as u64)));
                }
            });
        }
    });
    let results = slots
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect::<Result<Vec<_>>>()?;
    let mut groups = BTreeMap::new();
    let keys: Vec<(TaskKind, EditFamily)> = {
        let mut k: Vec<_> = results.iter().map(|r| (r.task, r.family)).collect();
        k.sort();
        k.dedup();
        k
    };
    for (t, f) in keys {
        let g = GroupStats::of(results.iter().filter(|r| r.task == t && r.family == f));
        groups.insert(format!("{}/{}", t, f.name()), g);
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(EvalReport {
        seed,
        weights: if cfg.inference.use_ema { "ema" } else { "raw" }.into(),
        overall: GroupStats::of(results.iter()),
        groups,
        invariants_passed: None,
        seconds,
        mean_case_ms: 1e3 * seconds * workers as f64 / results.len().max(1) as f64,
        cases: results,
    })
}

/// Default worker count for evaluation and data generation.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_passes_and_random_output_fails() {
        let cfg = Config::default();
        let cases = eval_cases(&cfg, 3).unwrap();
        assert_eq!(cases.len(), cfg.eval.cases);
        let mut rng = Rng::new(1);
        let mut random_passes = 0;
        for c in &cases {
            assert!(c.oracle().score(&c.target.frames()).unwrap().passed);
            random_passes += usize::from(c.oracle().score(&random_output(c, &mut rng)).unwrap().passed);
        }
        assert!(random_passes <= 2, "{random_passes}");
    }

    #[test]
    fn held_out_cases_differ_from_training_draws() {
        let cfg = Config::default();
        let a = eval_cases(&cfg, 0).unwrap();
        assert_eq!(a, eval_cases(&cfg, 0).unwrap());
        assert_ne!(a, eval_cases(&cfg, 1).unwrap());
    }
}
