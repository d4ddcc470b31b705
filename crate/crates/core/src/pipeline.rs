//! End-to-end run: corpus, synchronization, split, baselines, evaluation.

use std::path::Path;
use std::time::Instant;

use rand::RngCore;

use crate::config::TrainConfig;
use crate::domain::{Clip, SyncGroup, ViewId, ViewRole};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_matrix, foreign_cell, home_cells, render_csv, render_text_table, write_results_jsonl, CellSpec, EvalCell,
};
use crate::rng::substream;
use crate::sync::{build_sync_groups, stratified_split, Manifest, SplitAssignment, DEFAULT_FRACTIONS};
use crate::synth::{
    generate_corpus, generate_foreign_corpus, read_corpus, source_modality, GeneratorSpec, SyntheticCorpus,
};
use crate::trainer::{run_baselines, BaselineKind, BaselineRun, TrainingData};

/// Strength of the view and sensor shift of the foreign corpus.
pub const FOREIGN_MAGNITUDE: f64 = 1.0;
pub const MIN_OVERLAP_FRAMES: i64 = 1;

/// Clips with their manifest.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub clips: Vec<Clip>,
    pub manifest: Manifest,
}

impl From<SyntheticCorpus> for Corpus {
    fn from(c: SyntheticCorpus) -> Self {
        Self {
            clips: c.clips,
            manifest: c.manifest,
        }
    }
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let (clips, manifest) = read_corpus(dir)?;
        Ok(Self { clips, manifest })
    }
}

pub struct Benchmark {
    pub home: Corpus,
    pub foreign: Option<Corpus>,
    pub groups: Vec<SyncGroup>,
    pub split: SplitAssignment,
}

pub fn foreign_shift_seed(seed: u64) -> u64 {
    substream(seed, "foreign", 0).next_u64()
}

/// The manifest's anchor view and its positive views.
pub fn sync_views(manifest: &Manifest) -> Result<(ViewId, Vec<ViewId>)> {
    let anchor = manifest
        .views
        .iter()
        .copied()
        .find(|v| v.role == ViewRole::Anchor)
        .ok_or_else(|| Error::Manifest("no anchor view declared".into()))?;
    let positives = manifest.views.iter().copied().filter(|v| v.role == ViewRole::Positive).collect();
    Ok((anchor, positives))
}

/// Synchronized groups over the manifest's anchor and positive views.
pub fn sync_groups(manifest: &Manifest) -> Result<Vec<SyncGroup>> {
    let (anchor, positives) = sync_views(manifest)?;
    build_sync_groups(manifest, anchor, &positives, MIN_OVERLAP_FRAMES)
}

impl Benchmark {
    pub fn from_corpora(home: Corpus, foreign: Option<Corpus>, split_seed: u64) -> Result<Self> {
        let groups = sync_groups(&home.manifest)?;
        let split = stratified_split(&groups, DEFAULT_FRACTIONS, split_seed)?;
        Ok(Self {
            home,
            foreign,
            groups,
            split,
        })
    }

    /// Renders the home and foreign corpora from `spec`.
    pub fn generate(spec: &GeneratorSpec, split_seed: u64) -> Result<Self> {
        let home = generate_corpus(spec)?.into();
        let foreign = generate_foreign_corpus(spec, foreign_shift_seed(spec.seed), FOREIGN_MAGNITUDE)?.into();
        Self::from_corpora(home, Some(foreign), split_seed)
    }

    pub fn training_data(&self) -> Result<TrainingData> {
        TrainingData::prepare(&self.home.clips, &self.home.manifest, &self.groups, &self.split)
    }

    /// Home test-split cells, then the foreign anchor-view source cell.
    pub fn cells(&self) -> Result<Vec<CellSpec>> {
        let mut cells = home_cells(&self.home.clips, &self.home.manifest, &self.groups, &self.split)?;
        if let Some(foreign) = &self.foreign {
            let (anchor, _) = sync_views(&foreign.manifest)?;
            cells.push(foreign_cell(&foreign.clips, &foreign.manifest, anchor, &source_modality())?);
        }
        Ok(cells)
    }

    pub fn evaluate(&self, models: &[(String, EncoderParams)]) -> Result<Vec<EvalCell>> {
        evaluate_matrix(models, &self.cells()?)
    }
}

/// `results.jsonl`, `table.txt` and `table.csv` under `out`.
pub fn write_report(cells: &[EvalCell], out: &Path) -> Result<()> {
    write_results_jsonl(cells, &out.join("results.jsonl"))?;
    std::fs::write(out.join("table.txt"), render_text_table(cells))?;
    std::fs::write(out.join("table.csv"), render_csv(cells))?;
    Ok(())
}

pub struct RunSummary {
    pub runs: Vec<BaselineRun>,
    pub cells: Vec<EvalCell>,
    pub seconds: f64,
}

/// Trains `kinds`, evaluates them and writes every artifact under `out`:
/// the effective config, one directory per baseline, `results.jsonl`,
/// `table.txt` and `table.csv`.
pub fn run_benchmark(cfg: &TrainConfig, bench: &Benchmark, kinds: &[BaselineKind], out: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.toml"))?;
    let data = bench.training_data()?;
    let runs = run_baselines(&data, cfg, kinds)?;
    for r in &runs {
        r.save(&out.join(r.kind.name()))?;
    }
    let models: Vec<_> = runs
        .iter()
        .map(|r| (r.kind.name().to_string(), r.final_params().clone()))
        .collect();
    let cells = bench.evaluate(&models)?;
    write_report(&cells, out)?;
    Ok(RunSummary {
        runs,
        cells,
        seconds: start.elapsed().as_secs_f64(),
    })
}
