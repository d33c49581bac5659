//! Dataset export: one JSON record per line, raw tensor blobs for every
//! scene, and a manifest with per-entry counts.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Rng, Tensor};
use crate::renderer::tensor_file::save_tensor;
use crate::toydata::{color_features, vocab, ToyScene, CHANNELS};

use super::config::{Config, Stage};
use super::mixture::MixtureEntry;
use super::system::{draw_sample, Sample};
use super::train::stage_pairs;

const DATA_STREAM: u64 = 0x4441_5441;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub index: usize,
    pub entry: String,
    pub instruction_text: String,
    #[serde(flatten)]
    pub sample: Sample,
    /// Blob file names relative to the output directory.
    pub blobs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub stage: Stage,
    pub records: usize,
    pub counts: BTreeMap<String, usize>,
    /// Mixture weights of the stage's first phase, normalized.
    pub weights: BTreeMap<String, f64>,
}

/// Pixel features `[T*H*W, C]` of a scene.
pub fn scene_tensor(scene: &ToyScene) -> Tensor<f64> {
    Tensor::new(vec![scene.grid.count(), CHANNELS], color_features(&scene.frames())).expect("sized")
}

fn draw(cfg: &Config, stage: Stage, pairs: &[crate::toydata::PairRecord], i: usize) -> Result<(MixtureEntry, Sample)> {
    let sc = cfg.stage(stage)?;
    let mix = &sc.mixtures()?[0];
    let mut rng = Rng::with_stream(cfg.seed, DATA_STREAM).fork_path(&[stage.index(), i as u64]);
    let entry = mix.sample(&mut rng);
    let sample = draw_sample(entry, &cfg.data, sc.families.as_deref(), pairs, &mut rng)?;
    Ok((entry, sample))
}

/// Writes `n` records drawn from `stage`'s first-phase mixture into `out`.
/// Every record has its own random stream, so output does not depend on
/// `workers`.
pub fn gen_data(cfg: &Config, stage: Stage, n: usize, out: &Path, workers: usize) -> Result<Manifest> {
    std::fs::create_dir_all(out.join("blobs"))?;
    let pairs = stage_pairs(cfg, cfg.stage(stage)?)?;
    let workers = workers.clamp(1, n.max(1));
    let mut drawn: Vec<Option<Result<(MixtureEntry, Sample)>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let size = n.div_ceil(workers).max(1);
        for (c, chunk) in drawn.chunks_mut(size).enumerate() {
            let pairs = &pairs;
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(draw(cfg, stage, pairs, c * size + k));
                }
            });
        }
    });
    let mut lines = BufWriter::new(std::fs::File::create(out.join("records.jsonl"))?);
    let mut counts = BTreeMap::new();
    for (i, d) in drawn.into_iter().enumerate() {
        let (entry, sample) = d.expect("filled")?;
        *counts.entry(entry.name().to_string()).or_insert(0) += 1;
        let mut blobs = BTreeMap::new();
        for (name, scene) in [("source", &sample.source), ("reference", &sample.reference), ("target", &sample.target)] {
            if let Some(scene) = scene {
                let file = format!("blobs/{i:06}-{name}.prtf");
                save_tensor(&out.join(&file), &scene_tensor(scene))?;
                blobs.insert(name.to_string(), file);
            }
        }
        let rec = Record {
            index: i,
            entry: entry.name().into(),
            instruction_text: vocab::render(&sample.instruction),
            sample,
            blobs,
        };
        serde_json::to_writer(&mut lines, &rec)?;
        lines.write_all(b"\n")?;
    }
    lines.flush()?;
    let manifest = Manifest {
        seed: cfg.seed,
        stage,
        records: n,
        counts,
        weights: cfg.stage(stage)?.mixtures()?[0]
            .entries()
            .iter()
            .map(|(e, w)| (e.name().to_string(), *w))
            .collect(),
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::tensor_file::load_tensor;

    #[test]
    fn records_round_trip_and_output_ignores_worker_count() {
        let mut cfg = Config::default();
        cfg.data.pair_pool = 12;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = gen_data(&cfg, Stage::I, 30, a.path(), 1).unwrap();
        gen_data(&cfg, Stage::I, 30, b.path(), 3).unwrap();
        assert_eq!(m.counts.values().sum::<usize>(), 30);
        let la = std::fs::read_to_string(a.path().join("records.jsonl")).unwrap();
        assert_eq!(la, std::fs::read_to_string(b.path().join("records.jsonl")).unwrap());
        for line in la.lines() {
            let r: Record = serde_json::from_str(line).unwrap();
            let s: Sample = serde_json::from_str(line).unwrap();
            assert_eq!(r.sample, s);
            if let Some(t) = &s.target {
                assert_eq!(load_tensor::<f64>(&a.path().join(&r.blobs["target"])).unwrap(), scene_tensor(t));
            }
        }
    }
}
