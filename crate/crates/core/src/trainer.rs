//! The two training phases and the four baselines built from them.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_params, optimizer_to_file, save_params};
use crate::config::TrainConfig;
use crate::domain::{Clip, SyncGroup};
use crate::encoder::{
    apply_freeze, backward_batch, classify_backward, classify_batch, encode_batch, encode_batch_with_cache, hidden_through,
    project_backward, project_batch, EncoderDims, EncoderInput, EncoderParams, FreezeMask,
};
use crate::error::{Error, Result};
use crate::eval::topk_accuracy;
use crate::objectives::{cross_entropy, ib_loss, phase1_total, phase2_total, supcon_loss, LossValue};
use crate::optim::{cosine_lr, Adam};
use crate::pairing::{build_pairs, pseudo_label, PairQueueSet, PairingStats};
use crate::rng::substream;
use crate::sync::{resolve_groups, Manifest, Split, SplitAssignment};

/// An anchor clip with the clips of its synchronized positive views.
#[derive(Clone, Debug)]
pub struct GroupItem {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub label: usize,
}

/// Everything the training loops may see. Target clips carry no labels.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub clips: Vec<Clip>,
    pub phase1: Vec<GroupItem>,
    /// Anchor-view source clips of validation groups.
    pub val: Vec<(usize, usize)>,
    /// Anchor-view source clips of training groups.
    pub source: Vec<(usize, usize)>,
    /// Target-modality clips of training groups.
    pub target: Vec<usize>,
}

impl TrainingData {
    /// Selects training and validation clips. Target-modality labels are
    /// dropped from both the manifest and the clips before anything else
    /// reads them.
    pub fn prepare(clips: &[Clip], manifest: &Manifest, groups: &[SyncGroup], split: &SplitAssignment) -> Result<Self> {
        let manifest = manifest.stripped_of_target_labels();
        let mut out_clips = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for c in clips {
            let c = if c.modality.is_target() { c.unlabeled() } else { c.clone() };
            index.insert(c.clip_id.clone(), out_clips.len());
            out_clips.push(c);
        }
        let lookup = |r: &str| {
            index
                .get(r)
                .copied()
                .ok_or_else(|| Error::Manifest(format!("clip {r} listed in the manifest was not loaded")))
        };

        let mut phase1 = Vec::new();
        let mut val = Vec::new();
        let mut source = Vec::new();
        for g in groups {
            let anchor = lookup(&g.anchor.clip_ref)?;
            match split.split_of(g.group_id()) {
                Some(Split::Train) => {
                    let positives = g.positives.iter().map(|p| lookup(&p.clip_ref)).collect::<Result<Vec<_>>>()?;
                    phase1.push(GroupItem {
                        anchor,
                        positives,
                        label: g.class_id,
                    });
                    source.push((anchor, g.class_id));
                }
                Some(Split::Val) => val.push((anchor, g.class_id)),
                _ => {}
            }
        }

        let target_records: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| r.modality.is_target())
            .cloned()
            .collect();
        let mut target = Vec::new();
        for (r, g) in target_records.iter().zip(resolve_groups(groups, &target_records)) {
            if g.and_then(|g| split.split_of(g)) == Some(Split::Train) {
                target.push(lookup(&r.clip_ref)?);
            }
        }
        Ok(Self {
            clips: out_clips,
            phase1,
            val,
            source,
            target,
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: u8,
    pub kind: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ib: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairing: Option<PairingStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate_projections: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub floored_dims: Option<usize>,
}

impl MetricRecord {
    fn step(phase: u8, epoch: usize, step: usize, lr: f64, loss: &LossValue) -> Self {
        Self {
            phase,
            kind: "step".into(),
            epoch,
            step,
            lr,
            ce: loss.get("ce"),
            cl: loss.get("cl"),
            ib: loss.get("ib"),
            total: Some(loss.value),
            ..Default::default()
        }
    }
}

pub fn write_metrics(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PhaseOutput {
    pub params: EncoderParams,
    pub optimizer: Adam,
    pub metrics: Vec<MetricRecord>,
}

/// Top-1 of `params` on labeled clips.
pub fn accuracy_on(params: &EncoderParams, clips: &[Clip], items: &[(usize, usize)]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let inputs: Vec<EncoderInput> = items.iter().map(|&(i, _)| EncoderInput::Clip(&clips[i])).collect();
    let labels: Vec<usize> = items.iter().map(|&(_, y)| y).collect();
    let logits = classify_batch(&encode_batch(params, &inputs)?, params);
    topk_accuracy(&logits.view(), &labels, 1)
}

pub fn init_params(cfg: &TrainConfig) -> Result<EncoderParams> {
    EncoderParams::init(EncoderDims::from_config(cfg), &mut substream(cfg.seed, "init", 0))
}

fn check_dims(params: &EncoderParams, cfg: &TrainConfig) -> Result<()> {
    let want = EncoderDims::from_config(cfg);
    if params.dims != want {
        return Err(Error::InvalidArgument(format!(
            "checkpoint dimensions {:?} do not match the config {:?}",
            params.dims, want
        )));
    }
    Ok(())
}

/// Cross-entropy on anchors plus `λ1` times the contrastive loss over
/// anchors and one random positive view each. All layers train. Returns
/// the parameters with the best validation top-1.
pub fn train_phase1(data: &TrainingData, cfg: &TrainConfig, init: EncoderParams) -> Result<PhaseOutput> {
    if data.phase1.is_empty() {
        return Err(Error::InvalidArgument("no training groups for phase 1".into()));
    }
    check_dims(&init, cfg)?;
    let mut params = init;
    let flags = vec![true; params.tensors().len()];
    let mut opt = Adam::new(&params, &flags, cfg.weight_decay)?;
    let use_cl = cfg.lambda1 != 0.0;
    let mut metrics = Vec::new();
    let mut best: Option<(f64, EncoderParams)> = None;
    let mut step = 0;

    for epoch in 0..cfg.epochs_phase1 {
        let lr = cosine_lr(cfg.lr_phase1, epoch, cfg.epochs_phase1);
        let mut order: Vec<usize> = (0..data.phase1.len()).collect();
        order.shuffle(&mut substream(cfg.seed, "batching.phase1", epoch as u64));
        let mut view_rng = substream(cfg.seed, "views.phase1", epoch as u64);
        let mut degenerate = 0;
        let mut correct = 0.0;
        for batch in order.chunks(cfg.batch_phase1) {
            let items: Vec<&GroupItem> = batch.iter().map(|&i| &data.phase1[i]).collect();
            let labels: Vec<usize> = items.iter().map(|g| g.label).collect();
            let b = items.len();
            let mut inputs: Vec<EncoderInput> = items.iter().map(|g| EncoderInput::Clip(&data.clips[g.anchor])).collect();
            if use_cl {
                for g in &items {
                    // singleton groups stand in as their own positive
                    let pos = if g.positives.is_empty() {
                        g.anchor
                    } else {
                        g.positives[view_rng.random_range(0..g.positives.len())]
                    };
                    inputs.push(EncoderInput::Clip(&data.clips[pos]));
                }
            }
            let (z, caches) = encode_batch_with_cache(&params, &inputs)?;
            let z_anchor = z.slice(ndarray::s![..b, ..]).to_owned();
            let logits = classify_batch(&z_anchor, &params);
            correct += topk_accuracy(&logits.view(), &labels, 1)? * b as f64;
            let ce = cross_entropy(&logits.view(), &labels)?;
            let mut grad = params.zeros_like();
            let mut dz = Array2::zeros(z.dim());
            let d_anchor = classify_backward(&z_anchor, &ce.grad, &params, &mut grad);
            dz.slice_mut(ndarray::s![..b, ..]).assign(&d_anchor);

            let loss = if use_cl {
                let proj = project_batch(&z, &params);
                degenerate += proj.n_degenerate;
                let mut all_labels = labels.clone();
                all_labels.extend(&labels);
                let cl = supcon_loss(&proj.p.view(), &all_labels, cfg.tau)?;
                let dp = cl.grad * cfg.lambda1;
                dz += &project_backward(&z, &proj, &dp, &params, &mut grad);
                phase1_total(&ce.loss, &cl.loss, cfg.lambda1)
            } else {
                phase1_total(&ce.loss, &LossValue::single("cl", 0.0), 0.0)
            };
            grad.add_assign(&backward_batch(&params, &caches, &dz, 0, true));
            opt.step(&mut params, &grad, lr);
            metrics.push(MetricRecord::step(1, epoch, step, lr, &loss));
            step += 1;
        }

        // running accuracy over the epoch's batches
        let train_top1 = correct / data.phase1.len() as f64;
        let val_top1 = accuracy_on(&params, &data.clips, &data.val)?;
        metrics.push(MetricRecord {
            phase: 1,
            kind: "epoch".into(),
            epoch,
            step,
            lr,
            train_top1: Some(train_top1),
            val_top1: Some(val_top1),
            degenerate_projections: use_cl.then_some(degenerate),
            ..Default::default()
        });
        if best.as_ref().is_none_or(|(v, _)| val_top1 > *v) {
            best = Some((val_top1, params.clone()));
        }
    }
    let params = best.map(|(_, p)| p).unwrap_or(params);
    Ok(PhaseOutput {
        params,
        optimizer: opt,
        metrics,
    })
}

/// Output of the frozen blocks for each clip, computed once.
fn frozen_hidden(params: &EncoderParams, clips: &[Clip], ids: &[usize], prefix: usize) -> Result<Vec<Array2<f64>>> {
    ids.par_iter().map(|&i| hidden_through(params, &clips[i], prefix)).collect()
}

fn inputs_from<'a>(hidden: &'a [Array2<f64>], clips: &'a [Clip], ids: &[usize], rows: &[usize], prefix: usize) -> Vec<EncoderInput<'a>> {
    rows.iter()
        .map(|&r| {
            if prefix > 0 {
                EncoderInput::Hidden {
                    tokens: &hidden[r],
                    start_block: prefix,
                }
            } else {
                EncoderInput::Clip(&clips[ids[r]])
            }
        })
        .collect()
}

/// Cross-entropy on labeled source clips plus `α` times the
/// cross-correlation loss over pseudo-label-matched source/target pairs,
/// with the lower layers frozen. Returns the final parameters.
pub fn train_phase2(data: &TrainingData, cfg: &TrainConfig, start: EncoderParams) -> Result<PhaseOutput> {
    if data.source.is_empty() {
        return Err(Error::InvalidArgument("no labeled source clips for phase 2".into()));
    }
    if let Some(&i) = data.target.iter().find(|&&i| data.clips[i].class_id.is_some()) {
        return Err(Error::InvalidArgument(format!("target clip {} carries a label", data.clips[i].clip_id)));
    }
    check_dims(&start, cfg)?;
    let mask = FreezeMask::from_fraction(start.dims.n_blocks, cfg.freeze_fraction)?;
    let view = apply_freeze(start, mask)?;
    let flags = view.trainable_flags();
    let (mut params, mask) = (view.params, view.mask);
    let mut opt = Adam::new(&params, &flags, cfg.weight_decay)?;
    let prefix = mask.frozen_prefix();
    let lowest = mask.lowest_trainable_block();
    let embedding = mask.embedding_trainable();
    let use_ib = cfg.alpha != 0.0 && !data.target.is_empty();

    let source_ids: Vec<usize> = data.source.iter().map(|&(i, _)| i).collect();
    let source_labels: Vec<usize> = data.source.iter().map(|&(_, y)| y).collect();
    let (source_hidden, target_hidden) = if prefix > 0 {
        (
            frozen_hidden(&params, &data.clips, &source_ids, prefix)?,
            if use_ib {
                frozen_hidden(&params, &data.clips, &data.target, prefix)?
            } else {
                Vec::new()
            },
        )
    } else {
        (Vec::new(), Vec::new())
    };

    let mut queues = PairQueueSet::new(params.dims.num_classes, cfg.queue_capacity);
    let mut metrics = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs_phase2 {
        let lr = cosine_lr(cfg.lr_phase2, epoch, cfg.epochs_phase2);
        let mut s_order: Vec<usize> = (0..source_ids.len()).collect();
        s_order.shuffle(&mut substream(cfg.seed, "batching.phase2.source", epoch as u64));
        let mut t_order: Vec<usize> = (0..data.target.len()).collect();
        t_order.shuffle(&mut substream(cfg.seed, "batching.phase2.target", epoch as u64));
        let mut epoch_stats = PairingStats::default();
        let mut floored = 0;

        for (bi, s_rows) in s_order.chunks(cfg.batch_phase2).enumerate() {
            let labels: Vec<usize> = s_rows.iter().map(|&r| source_labels[r]).collect();
            let s_inputs = inputs_from(&source_hidden, &data.clips, &source_ids, s_rows, prefix);
            let (zs, s_caches) = encode_batch_with_cache(&params, &s_inputs)?;
            let ce = cross_entropy(&classify_batch(&zs, &params).view(), &labels)?;
            let mut grad = params.zeros_like();
            let mut dzs = classify_backward(&zs, &ce.grad, &params, &mut grad);
            let mut stats = PairingStats::default();
            let mut ib_value = LossValue::single("ib", 0.0);

            if use_ib {
                let t_rows: Vec<usize> = (0..cfg.batch_phase2.min(t_order.len()))
                    .map(|j| t_order[(bi * cfg.batch_phase2 + j) % t_order.len()])
                    .collect();
                let t_inputs = inputs_from(&target_hidden, &data.clips, &data.target, &t_rows, prefix);
                let (zt, t_caches) = encode_batch_with_cache(&params, &t_inputs)?;
                let pl = pseudo_label(&classify_batch(&zt, &params).view(), cfg.pseudo_conf_threshold);
                let pairs = build_pairs(&pl.accepted, &labels, &queues, cfg.pairs_per_target)?;
                queues.update_queues(&zs.view(), &labels, step as u64)?;
                stats.accepted_targets = pl.accepted.len();
                stats.rejected_targets = pl.n_rejected;
                stats.skipped_targets = pairs.n_skipped_targets;
                stats.in_batch_pairs = pairs.n_in_batch();
                stats.queue_pairs = pairs.n_queued();
                if pairs.is_sufficient() {
                    stats.ib_steps = 1;
                    let (s_feats, t_feats) = pairs.gather(&zs.view(), &zt.view());
                    let ib = ib_loss(&s_feats.view(), &t_feats.view(), cfg.lambda_offdiag)?;
                    floored += ib.n_floored;
                    let mut dzt = Array2::zeros(zt.dim());
                    let gs = ib.grad_source * cfg.alpha;
                    let gt = ib.grad_target * cfg.alpha;
                    pairs.scatter(&gs.view(), &gt.view(), &mut dzs, &mut dzt);
                    grad.add_assign(&backward_batch(&params, &t_caches, &dzt, lowest, embedding));
                    ib_value = ib.loss;
                } else {
                    stats.ib_skipped_steps = 1;
                }
            }
            grad.add_assign(&backward_batch(&params, &s_caches, &dzs, lowest, embedding));
            opt.step(&mut params, &grad, lr);
            let loss = phase2_total(&ce.loss, &ib_value, if use_ib { cfg.alpha } else { 0.0 });
            let mut rec = MetricRecord::step(2, epoch, step, lr, &loss);
            if use_ib {
                rec.pairing = Some(stats);
            }
            metrics.push(rec);
            epoch_stats.add(&stats);
            step += 1;
        }
        let val_top1 = accuracy_on(&params, &data.clips, &data.val)?;
        metrics.push(MetricRecord {
            phase: 2,
            kind: "epoch".into(),
            epoch,
            step,
            lr,
            val_top1: Some(val_top1),
            pairing: use_ib.then_some(epoch_stats),
            floored_dims: use_ib.then_some(floored),
            ..Default::default()
        });
    }
    Ok(PhaseOutput {
        params,
        optimizer: opt,
        metrics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    FinetuneOnly,
    FinetuneContrastive,
    UdaOnly,
    FullMethod,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::FinetuneOnly,
        BaselineKind::FinetuneContrastive,
        BaselineKind::UdaOnly,
        BaselineKind::FullMethod,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::FinetuneOnly => "finetune_only",
            BaselineKind::FinetuneContrastive => "finetune_contrastive",
            BaselineKind::UdaOnly => "uda_only",
            BaselineKind::FullMethod => "full_method",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn uses_contrastive(self) -> bool {
        matches!(self, BaselineKind::FinetuneContrastive | BaselineKind::FullMethod)
    }

    pub fn adapts(self) -> bool {
        matches!(self, BaselineKind::UdaOnly | BaselineKind::FullMethod)
    }

    /// Phase-1 config: `λ1 = 0` for the baselines without the contrastive
    /// term.
    pub fn phase1_config(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        if !self.uses_contrastive() {
            c.lambda1 = 0.0;
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub kind: BaselineKind,
    pub phase1: PhaseOutput,
    pub phase2: Option<PhaseOutput>,
}

impl BaselineRun {
    pub fn final_params(&self) -> &EncoderParams {
        self.phase2.as_ref().map_or(&self.phase1.params, |p| &p.params)
    }

    pub fn metrics(&self) -> Vec<MetricRecord> {
        let mut m = self.phase1.metrics.clone();
        if let Some(p2) = &self.phase2 {
            m.extend(p2.metrics.iter().cloned());
        }
        m
    }

    /// `phase1.ckpt`, `model.ckpt`, `optimizer.ckpt` and `metrics.jsonl`
    /// under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = |phase: u8| serde_json::json!({"baseline": self.kind.name(), "phase": phase});
        save_params(&self.phase1.params, meta(1), &dir.join("phase1.ckpt"))?;
        let (last, phase) = match &self.phase2 {
            Some(p2) => (p2, 2),
            None => (&self.phase1, 1),
        };
        save_params(&last.params, meta(phase), &dir.join("model.ckpt"))?;
        optimizer_to_file(&last.optimizer, &last.params)?.save(&dir.join("optimizer.ckpt"))?;
        write_metrics(&self.metrics(), &dir.join("metrics.jsonl"))
    }
}

/// Runs the requested baselines, training each distinct phase-1 variant
/// once.
pub fn run_baselines(data: &TrainingData, cfg: &TrainConfig, kinds: &[BaselineKind]) -> Result<Vec<BaselineRun>> {
    let mut phase1_cache: HashMap<bool, PhaseOutput> = HashMap::new();
    let mut out = Vec::new();
    for &kind in kinds {
        let key = kind.uses_contrastive();
        if !phase1_cache.contains_key(&key) {
            let c1 = kind.phase1_config(cfg);
            let p1 = train_phase1(data, &c1, init_params(&c1)?)?;
            phase1_cache.insert(key, p1);
        }
        let phase1 = phase1_cache[&key].clone();
        let phase2 = if kind.adapts() {
            Some(train_phase2(data, cfg, phase1.params.clone())?)
        } else {
            None
        };
        out.push(BaselineRun { kind, phase1, phase2 });
    }
    Ok(out)
}

pub fn run_baseline(data: &TrainingData, cfg: &TrainConfig, kind: BaselineKind) -> Result<BaselineRun> {
    Ok(run_baselines(data, cfg, &[kind])?.remove(0))
}

pub fn load_checkpoint_for(cfg: &TrainConfig, path: &Path) -> Result<EncoderParams> {
    let (params, _) = load_params(path)?;
    check_dims(&params, cfg)?;
    Ok(params)
}

