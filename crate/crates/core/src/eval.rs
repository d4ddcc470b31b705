//! Top-k accuracy and the baseline × cell comparison matrix.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::domain::{Clip, ModalityId, SyncGroup, ViewId};
use crate::encoder::{classify_batch, encode_batch, EncoderInput, EncoderParams};
use crate::error::{Error, Result};
use crate::sync::{resolve_groups, Manifest, Split, SplitAssignment};

/// Position of `label` when classes are ordered by descending logit, ties
/// going to the smaller class index.
pub fn label_rank(row: &[f64], label: usize) -> usize {
    let y = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > y || (v == y && j < label))
        .count()
}

/// Fraction of rows whose label is among the `k` highest logits.
pub fn topk_accuracy(logits: &ArrayView2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    let n_classes = logits.ncols();
    if k == 0 || k > n_classes {
        return Err(Error::InvalidArgument(format!("k = {k} outside [1, {n_classes}]")));
    }
    if labels.len() != logits.nrows() {
        return Err(Error::DimensionMismatch {
            axis: "labels".into(),
            expected: logits.nrows(),
            actual: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no rows to score".into()));
    }
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| label_rank(row.as_slice().expect("row-major"), y) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Home,
    Foreign,
}

/// Accuracy of one model on one (view, modality, corpus) slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub baseline: String,
    pub view: ViewId,
    pub modality: ModalityId,
    pub corpus: CorpusKind,
    pub top1: f64,
    pub top5: f64,
    pub n: usize,
}

/// Clips and labels of one evaluation slice.
#[derive(Clone, Debug)]
pub struct CellSpec {
    pub view: ViewId,
    pub modality: ModalityId,
    pub corpus: CorpusKind,
    pub clips: Vec<Clip>,
    pub labels: Vec<usize>,
}

impl CellSpec {
    pub fn column_name(&self) -> String {
        let corpus = match self.corpus {
            CorpusKind::Home => "",
            CorpusKind::Foreign => "foreign ",
        };
        format!("{corpus}{} {}", self.view, self.modality.name)
    }
}

fn labels_by_ref(manifest: &Manifest) -> HashMap<&str, usize> {
    manifest
        .records
        .iter()
        .filter_map(|r| r.class_id.map(|c| (r.clip_ref.as_str(), c)))
        .collect()
}

/// Test-split slices of the home corpus, one per (view, modality) present
/// in the manifest, ordered by modality then view. Clips are matched to
/// groups through [`resolve_groups`], so held-out views and the target
/// modality are covered too. Labels come from the manifest.
pub fn home_cells(clips: &[Clip], manifest: &Manifest, groups: &[SyncGroup], split: &SplitAssignment) -> Result<Vec<CellSpec>> {
    if split.groups_in(Split::Test).next().is_none() {
        return Err(Error::InvalidArgument("split assignment has no test groups".into()));
    }
    let labels = labels_by_ref(manifest);
    let by_ref: HashMap<&str, &Clip> = clips.iter().map(|c| (c.clip_id.as_str(), c)).collect();
    let resolved = resolve_groups(groups, &manifest.records);
    let mut cells = Vec::new();
    for modality in &manifest.modalities {
        for &view in &manifest.views {
            let mut cell = CellSpec {
                view,
                modality: modality.clone(),
                corpus: CorpusKind::Home,
                clips: Vec::new(),
                labels: Vec::new(),
            };
            for (r, group) in manifest.records.iter().zip(&resolved) {
                if r.view != view || r.modality != *modality {
                    continue;
                }
                let in_test = group.and_then(|g| split.split_of(g)) == Some(Split::Test);
                let (Some(clip), Some(&label)) = (by_ref.get(r.clip_ref.as_str()), labels.get(r.clip_ref.as_str())) else {
                    continue;
                };
                if in_test {
                    cell.clips.push((*clip).clone());
                    cell.labels.push(label);
                }
            }
            if !cell.clips.is_empty() {
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

/// Every clip of `view` in `modality` of a foreign corpus.
pub fn foreign_cell(clips: &[Clip], manifest: &Manifest, view: ViewId, modality: &ModalityId) -> Result<CellSpec> {
    let labels = labels_by_ref(manifest);
    let mut cell = CellSpec {
        view,
        modality: modality.clone(),
        corpus: CorpusKind::Foreign,
        clips: Vec::new(),
        labels: Vec::new(),
    };
    for clip in clips {
        if clip.view.index == view.index && clip.modality.name == modality.name {
            let label = labels
                .get(clip.clip_id.as_str())
                .ok_or_else(|| Error::Manifest(format!("foreign clip {} has no label", clip.clip_id)))?;
            cell.clips.push(clip.clone());
            cell.labels.push(*label);
        }
    }
    if cell.clips.is_empty() {
        return Err(Error::InvalidArgument(format!("foreign corpus has no {view} {} clips", modality.name)));
    }
    Ok(cell)
}

pub fn evaluate_cell(baseline: &str, params: &EncoderParams, cell: &CellSpec) -> Result<EvalCell> {
    let inputs: Vec<EncoderInput> = cell.clips.iter().map(EncoderInput::Clip).collect();
    let logits = classify_batch(&encode_batch(params, &inputs)?, params);
    let k5 = 5.min(params.dims.num_classes);
    Ok(EvalCell {
        baseline: baseline.into(),
        view: cell.view,
        modality: cell.modality.clone(),
        corpus: cell.corpus,
        top1: topk_accuracy(&logits.view(), &cell.labels, 1)?,
        top5: topk_accuracy(&logits.view(), &cell.labels, k5)?,
        n: cell.labels.len(),
    })
}

/// Every baseline on every cell, baselines in the given order.
pub fn evaluate_matrix(models: &[(String, EncoderParams)], cells: &[CellSpec]) -> Result<Vec<EvalCell>> {
    if let Some((_, first)) = models.first() {
        if let Some((name, _)) = models.iter().find(|(_, p)| p.dims != first.dims) {
            return Err(Error::InvalidArgument(format!("checkpoint {name} has different dimensions")));
        }
    }
    let mut out = Vec::new();
    for (name, params) in models {
        for cell in cells {
            out.push(evaluate_cell(name, params, cell)?);
        }
    }
    Ok(out)
}

pub fn write_results_jsonl(cells: &[EvalCell], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for c in cells {
        serde_json::to_writer(&mut buf, c)?;
        buf.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_results_jsonl(path: &Path) -> Result<Vec<EvalCell>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn column_label(c: &EvalCell) -> String {
    let corpus = match c.corpus {
        CorpusKind::Home => "",
        CorpusKind::Foreign => "foreign ",
    };
    format!("{corpus}{} {}", c.view, c.modality.name)
}

/// Rows are baselines, columns are cells with a top-1 and a top-5
/// sub-column, values in percent.
fn table_rows(cells: &[EvalCell]) -> (Vec<String>, Vec<String>, Vec<Vec<String>>) {
    let mut baselines: Vec<String> = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for c in cells {
        if !baselines.contains(&c.baseline) {
            baselines.push(c.baseline.clone());
        }
        let col = column_label(c);
        if !columns.contains(&col) {
            columns.push(col);
        }
    }
    let rows = baselines
        .iter()
        .map(|b| {
            let mut row = Vec::new();
            for col in &columns {
                match cells.iter().find(|c| &c.baseline == b && &column_label(c) == col) {
                    Some(c) => {
                        row.push(format!("{:.2}", 100.0 * c.top1));
                        row.push(format!("{:.2}", 100.0 * c.top5));
                    }
                    None => {
                        row.push("-".into());
                        row.push("-".into());
                    }
                }
            }
            row
        })
        .collect();
    (baselines, columns, rows)
}

pub fn render_text_table(cells: &[EvalCell]) -> String {
    let (baselines, columns, rows) = table_rows(cells);
    let mut header1 = vec![String::new()];
    let mut header2 = vec!["baseline".to_string()];
    for col in &columns {
        header1.push(col.clone());
        header1.push(String::new());
        header2.push("top1".into());
        header2.push("top5".into());
    }
    let mut all: Vec<Vec<String>> = vec![header1, header2];
    for (b, row) in baselines.iter().zip(rows) {
        let mut r = vec![b.clone()];
        r.extend(row);
        all.push(r);
    }
    let n_cols = all[0].len();
    let mut widths = vec![0; n_cols];
    for r in &all {
        for (i, v) in r.iter().enumerate() {
            widths[i] = widths[i].max(v.chars().count());
        }
    }
    // a column label spans its top1 and top5 sub-columns
    for i in (1..n_cols).step_by(2) {
        let need = all[0][i].chars().count();
        let have = widths[i] + 2 + widths[i + 1];
        if need > have {
            widths[i + 1] += need - have;
        }
    }
    let mut out = String::new();
    for (ri, r) in all.iter().enumerate() {
        let mut line = String::new();
        let mut i = 0;
        while i < n_cols {
            if ri == 0 && i > 0 {
                let span = widths[i] + 2 + widths[i + 1];
                let _ = write!(line, "  {:<span$}", r[i]);
                i += 2;
                continue;
            }
            if i == 0 {
                let _ = write!(line, "{:<w$}", r[i], w = widths[0]);
            } else {
                let _ = write!(line, "  {:>w$}", r[i], w = widths[i]);
            }
            i += 1;
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

pub fn render_csv(cells: &[EvalCell]) -> String {
    let mut out = String::from("baseline,view,modality,corpus,top1,top5,n\n");
    for c in cells {
        let corpus = match c.corpus {
            CorpusKind::Home => "home",
            CorpusKind::Foreign => "foreign",
        };
        let _ = writeln!(out, "{},{},{},{},{:.6},{:.6},{}", c.baseline, c.view, c.modality.name, corpus, c.top1, c.top5, c.n);
    }
    out
}

/// Looks up the top-1 of a baseline on a column such as `"V1 modB"`.
pub fn top1_of(cells: &[EvalCell], baseline: &str, column: &str) -> Option<f64> {
    cells
        .iter()
        .find(|c| c.baseline == baseline && column_label(c) == column)
        .map(|c| c.top1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn k_equals_classes_is_one() {
        let logits = array![[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]];
        assert_eq!(topk_accuracy(&logits.view(), &[1, 2], 3).unwrap(), 1.0);
    }

    #[test]
    fn ties_favor_smaller_index() {
        let logits = Array2::zeros((4, 5));
        assert_eq!(topk_accuracy(&logits.view(), &[0, 0, 1, 3], 1).unwrap(), 0.5);
        assert_eq!(topk_accuracy(&logits.view(), &[0, 4, 1, 3], 4).unwrap(), 0.75);
        assert!(topk_accuracy(&logits.view(), &[0, 0, 1, 3], 0).is_err());
    }

    #[test]
    fn table_mentions_every_baseline() {
        let cell = |b: &str, t1: f64| EvalCell {
            baseline: b.into(),
            view: crate::synth::V1_ANCHOR,
            modality: crate::synth::source_modality(),
            corpus: CorpusKind::Home,
            top1: t1,
            top5: 1.0,
            n: 10,
        };
        let cells = vec![cell("finetune_only", 0.5), cell("full_method", 0.9)];
        let text = render_text_table(&cells);
        assert!(text.contains("finetune_only"));
        assert!(text.contains("90.00"));
        assert_eq!(render_csv(&cells).lines().count(), 3);
        assert_eq!(top1_of(&cells, "full_method", "V1 modA"), Some(0.9));
    }
}
