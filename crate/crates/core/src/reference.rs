//! Straight-line loop implementations used to cross-check the vectorized
//! code. Slow on purpose; nothing in training calls these.

use rand::Rng;

use crate::domain::{Clip, DomainRole, ModalityId, SampleRecord, SyncGroup, ViewId, ViewRole};
use crate::encoder::{EncoderParams, LN_EPS};
use crate::rng::StreamRng;
use crate::sync::Manifest;

type Mat = Vec<Vec<f64>>;

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs {
        s += (x - m).exp();
    }
    m + s.ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        total += log_sum_exp(row) - row[y];
    }
    total / logits.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `None` when no anchor has a positive.
pub fn supcon(p: &Mat, labels: &[usize], tau: f64) -> Option<f64> {
    let n = p.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let mut denom_terms = Vec::new();
        for k in 0..n {
            if k != i {
                denom_terms.push(dot(&p[i], &p[k]) / tau);
            }
        }
        let lse = log_sum_exp(&denom_terms);
        let mut inner = 0.0;
        let mut n_pos = 0;
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                inner += -(dot(&p[i], &p[j]) / tau - lse);
                n_pos += 1;
            }
        }
        if n_pos > 0 {
            total += inner / n_pos as f64;
            anchors += 1;
        }
    }
    (anchors > 0).then(|| total / anchors as f64)
}

fn standardize_columns(x: &Mat) -> Mat {
    let n = x.len();
    let d = x[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut mean = 0.0;
        for row in x {
            mean += row[j];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for row in x {
            var += (row[j] - mean) * (row[j] - mean);
        }
        let sd = (var / n as f64).sqrt().max(crate::objectives::STD_FLOOR);
        for i in 0..n {
            out[i][j] = (x[i][j] - mean) / sd;
        }
    }
    out
}

pub fn correlation(s: &Mat, t: &Mat) -> Mat {
    let n = s.len();
    let d = s[0].len();
    let sh = standardize_columns(s);
    let th = standardize_columns(t);
    let mut c = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            for r in 0..n {
                c[i][j] += sh[r][i] * th[r][j];
            }
            c[i][j] /= n as f64;
        }
    }
    c
}

pub fn ib(s: &Mat, t: &Mat, lambda_offdiag: f64) -> f64 {
    let c = correlation(s, t);
    let mut loss = 0.0;
    for i in 0..c.len() {
        for j in 0..c.len() {
            if i == j {
                loss += (1.0 - c[i][i]) * (1.0 - c[i][i]);
            } else {
                loss += lambda_offdiag * c[i][j] * c[i][j];
            }
        }
    }
    loss
}

/// Sorts class indices by descending logit (stable, so ties keep the
/// smaller index first) and checks the first `k`.
pub fn topk_accuracy(logits: &Mat, labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (row, &y) in logits.iter().zip(labels) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        if order[..k].contains(&y) {
            hits += 1;
        }
    }
    hits as f64 / logits.len() as f64
}

/// `(index, class)` of rows whose top softmax probability reaches the
/// threshold.
pub fn pseudo_labels(logits: &Mat, threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, row) in logits.iter().enumerate() {
        let p = softmax(row);
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        if p[best] >= threshold {
            out.push((i, best));
        }
    }
    out
}

fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * inv * g[i] + b[i]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `x · W + b` for one row, `W` given as a row-major `rows × cols` slice.
fn affine(x: &[f64], w: &[f64], b: &[f64], cols: usize) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

fn slice(a: &ndarray::Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn v(a: &ndarray::Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// Class-token embedding computed token by token.
pub fn encode(clip: &Clip, params: &EncoderParams) -> Vec<f64> {
    let dims = params.dims;
    let d = dims.d_model;
    let (pt, ph) = (dims.patch_t, dims.patch_hw);
    let cd = clip.dims;
    let mut tokens: Mat = vec![v(&params.cls).to_vec()];
    for t0 in (0..cd.frames).step_by(pt) {
        for y0 in (0..cd.height).step_by(ph) {
            for x0 in (0..cd.width).step_by(ph) {
                let mut patch = Vec::new();
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..ph {
                            for c in 0..cd.channels {
                                patch.push(clip.data[cd.offset(t0 + dt, y0 + dy, x0 + dx, c)] as f64);
                            }
                        }
                    }
                }
                tokens.push(affine(&patch, slice(&params.patch_w), v(&params.patch_b), d));
            }
        }
    }
    for (i, tok) in tokens.iter_mut().enumerate() {
        for j in 0..d {
            tok[j] += params.pos[[i, j]];
        }
    }
    let n = tokens.len();
    let heads = dims.n_heads;
    let hd = d / heads;
    for blk in &params.blocks {
        let a: Mat = tokens.iter().map(|x| layer_norm_row(x, v(&blk.ln1_g), v(&blk.ln1_b))).collect();
        let qkv: Mat = a.iter().map(|x| affine(x, slice(&blk.w_qkv), v(&blk.b_qkv), 3 * d)).collect();
        let mut attn = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let mut scores = Vec::with_capacity(n);
                for j in 0..n {
                    let mut s = 0.0;
                    for e in 0..hd {
                        s += qkv[i][h * hd + e] * qkv[j][d + h * hd + e];
                    }
                    scores.push(s / (hd as f64).sqrt());
                }
                let p = softmax(&scores);
                for j in 0..n {
                    for e in 0..hd {
                        attn[i][h * hd + e] += p[j] * qkv[j][2 * d + h * hd + e];
                    }
                }
            }
        }
        for i in 0..n {
            let o = affine(&attn[i], slice(&blk.w_o), v(&blk.b_o), d);
            for j in 0..d {
                tokens[i][j] += o[j];
            }
            let m = layer_norm_row(&tokens[i], v(&blk.ln2_g), v(&blk.ln2_b));
            let u: Vec<f64> = affine(&m, slice(&blk.w_fc1), v(&blk.b_fc1), dims.d_ff)
                .into_iter()
                .map(gelu)
                .collect();
            let f = affine(&u, slice(&blk.w_fc2), v(&blk.b_fc2), d);
            for j in 0..d {
                tokens[i][j] += f[j];
            }
        }
    }
    layer_norm_row(&tokens[0], v(&params.norm_g), v(&params.norm_b))
}

pub fn classify(z: &[f64], params: &EncoderParams) -> Vec<f64> {
    affine(z, slice(&params.cls_w), v(&params.cls_b), params.dims.num_classes)
}

pub fn project(z: &[f64], params: &EncoderParams) -> Vec<f64> {
    let h: Vec<f64> = affine(z, slice(&params.proj_w1), v(&params.proj_b1), params.dims.d_model)
        .into_iter()
        .map(gelu)
        .collect();
    let p = affine(&h, slice(&params.proj_w2), v(&params.proj_b2), params.dims.d_proj);
    let norm = dot(&p, &p).sqrt();
    p.iter().map(|x| x / norm).collect()
}

/// All-pairs aligner: for every anchor record, scans the whole manifest for
/// each positive view.
pub fn brute_force_sync_groups(manifest: &Manifest, anchor: ViewId, positives: &[ViewId], min_overlap: i64) -> Vec<SyncGroup> {
    let mut groups = Vec::new();
    for a in &manifest.records {
        if a.view.index != anchor.index || a.modality.is_target() {
            continue;
        }
        let class = a.class_id.expect("labeled anchor");
        let mut chosen: Vec<SampleRecord> = Vec::new();
        for p in positives {
            let mut best: Option<(&SampleRecord, i64)> = None;
            for r in &manifest.records {
                if r.view.index != p.index || r.modality.name != a.modality.name || r.modality.is_target() || r.class_id != Some(class) {
                    continue;
                }
                let ov = (a.end_frame.min(r.end_frame) - a.start_frame.max(r.start_frame)).max(0);
                if ov < min_overlap {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((b, bo)) => ov > bo || (ov == bo && (r.start_frame < b.start_frame || (r.start_frame == b.start_frame && r.clip_ref < b.clip_ref))),
                };
                if better {
                    best = Some((r, ov));
                }
            }
            if let Some((r, _)) = best {
                chosen.push(r.clone());
            }
        }
        if chosen.len() == positives.len() {
            let mut s = a.start_frame;
            let mut e = a.end_frame;
            for r in &chosen {
                s = s.max(r.start_frame);
                e = e.min(r.end_frame);
            }
            groups.push(SyncGroup {
                anchor: a.clone(),
                positives: chosen,
                class_id: class,
                overlap_window: (s, e.max(s)),
            });
        } else {
            groups.push(SyncGroup {
                anchor: a.clone(),
                positives: Vec::new(),
                class_id: class,
                overlap_window: (a.start_frame, a.end_frame),
            });
        }
    }
    groups
}

/// A manifest with anchor view 1, positive views 2 and 3, `num_classes`
/// classes of `min_anchors..=max_anchors` anchors each, a random number of
/// positive-view records and some unlabeled target records. Intervals are
/// short and start on a coarse grid so overlaps and ties are common.
pub fn random_manifest(rng: &mut StreamRng, num_classes: usize, min_anchors: usize, max_anchors: usize, max_records: usize) -> Manifest {
    let source = ModalityId::new(0, "modA", DomainRole::Source);
    let target = ModalityId::new(1, "modB", DomainRole::Target);
    let views = [
        ViewId::new(1, ViewRole::Anchor),
        ViewId::new(2, ViewRole::Positive),
        ViewId::new(3, ViewRole::Positive),
    ];
    let mut records = Vec::new();
    let push = |rng: &mut StreamRng, records: &mut Vec<SampleRecord>, view: ViewId, modality: &ModalityId, class_id: Option<usize>| {
        let start = 5 * rng.random_range(0..40i64);
        let len = 5 * rng.random_range(1..8i64);
        records.push(SampleRecord {
            clip_ref: format!("r{:04}", records.len()),
            view,
            modality: modality.clone(),
            class_id,
            start_frame: start,
            end_frame: start + len,
        });
    };
    for class in 0..num_classes {
        for _ in 0..rng.random_range(min_anchors..=max_anchors) {
            push(rng, &mut records, views[0], &source, Some(class));
        }
    }
    let remaining = max_records.saturating_sub(records.len());
    for _ in 0..rng.random_range(0..=remaining) {
        let class = rng.random_range(0..num_classes);
        match rng.random_range(0..5) {
            0 | 1 => push(rng, &mut records, views[1], &source, Some(class)),
            2 | 3 => push(rng, &mut records, views[2], &source, Some(class)),
            _ => {
                let view = views[rng.random_range(0..3)];
                push(rng, &mut records, view, &target, None)
            }
        }
    }
    Manifest::new(
        records,
        (0..num_classes).map(|c| format!("class{c}")).collect(),
        views.to_vec(),
        vec![source, target],
    )
    .expect("generated manifest is valid")
}
