//! Forward and backward passes of the joint space-time transformer and its
//! two heads.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{Block, EncoderDims, EncoderParams};
use crate::domain::Clip;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `acc += aᵀ·b`
#[inline]
fn add_at_b(acc: &mut Array2<f64>, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    general_mat_mul(1.0, &a.t(), b, 1.0, acc);
}

#[inline]
fn add_col_sums(acc: &mut Array1<f64>, x: &ArrayView2<f64>) {
    *acc += &x.sum_axis(Axis(0));
}

/// Checks clip shape against the encoder, naming the first bad axis.
pub fn check_clip(dims: &EncoderDims, clip: &Clip) -> Result<()> {
    let want = dims.clip;
    for (axis, expected, actual) in [
        ("frames", want.frames, clip.dims.frames),
        ("height", want.height, clip.dims.height),
        ("width", want.width, clip.dims.width),
        ("channels", want.channels, clip.dims.channels),
        ("data", want.len(), clip.data.len()),
    ] {
        if expected != actual {
            return Err(Error::DimensionMismatch {
                axis: axis.into(),
                expected,
                actual,
            });
        }
    }
    Ok(())
}

/// Non-overlapping `patch_t × patch_hw × patch_hw` tubes, one row per
/// patch in (t, y, x) order, each row laid out as (dt, dy, dx, c).
pub fn patchify(dims: &EncoderDims, clip: &Clip) -> Result<Array2<f64>> {
    check_clip(dims, clip)?;
    let (gt, gh, gw) = dims.grid();
    let (pt, ph) = (dims.patch_t, dims.patch_hw);
    let c = dims.clip.channels;
    let cd = dims.clip;
    let mut out = Array2::zeros((dims.n_patches(), dims.patch_dim()));
    let mut row = 0;
    for it in 0..gt {
        for iy in 0..gh {
            for ix in 0..gw {
                let mut dst = out.row_mut(row);
                let dst = dst.as_slice_mut().expect("standard layout");
                let mut k = 0;
                for dt in 0..pt {
                    for dy in 0..ph {
                        let base = cd.offset(it * pt + dt, iy * ph + dy, ix * ph, 0);
                        let src = &clip.data[base..base + ph * c];
                        for v in src {
                            dst[k] = *v as f64;
                            k += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx`; accumulates into `dg`, `db`.
pub fn layer_norm_backward(
    dy: &ArrayView2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xh), is) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
        for (v, x) in row.iter_mut().zip(xh.iter()) {
            *v = is * (*v - mean_d - x * mean_dx);
        }
    }
    dx
}

fn softmax_rows_inplace(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    m: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

pub fn block_forward(blk: &Block, h: &Array2<f64>, n_heads: usize) -> (Array2<f64>, BlockCache) {
    let (n, d) = h.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(h, &blk.ln1_g, &blk.ln1_b);
    let qkv = a.dot(&blk.w_qkv) + &blk.b_qkv;
    let mut o = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let q = qkv.slice(s![.., head * dh..(head + 1) * dh]);
        let k = qkv.slice(s![.., d + head * dh..d + (head + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + head * dh..2 * d + (head + 1) * dh]);
        let mut sc = q.dot(&k.t());
        sc *= scale;
        softmax_rows_inplace(&mut sc);
        o.slice_mut(s![.., head * dh..(head + 1) * dh]).assign(&sc.dot(&v));
        probs.push(sc);
    }
    let h1 = o.dot(&blk.w_o) + &blk.b_o + h;
    let (m, ln2) = layer_norm(&h1, &blk.ln2_g, &blk.ln2_b);
    let u = m.dot(&blk.w_fc1) + &blk.b_fc1;
    let g = u.mapv(gelu);
    let out = g.dot(&blk.w_fc2) + &blk.b_fc2 + &h1;
    (
        out,
        BlockCache {
            ln1,
            a,
            qkv,
            probs,
            o,
            ln2,
            m,
            u,
            g,
        },
    )
}

/// Accumulates parameter gradients into `grad`; returns the gradient with
/// respect to the block input.
pub fn block_backward(
    blk: &Block,
    cache: &BlockCache,
    dout: &Array2<f64>,
    n_heads: usize,
    grad: &mut Block,
) -> Array2<f64> {
    let (n, d) = dout.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP branch
    add_at_b(&mut grad.w_fc2, &cache.g.view(), &dout.view());
    add_col_sums(&mut grad.b_fc2, &dout.view());
    let mut du = dout.dot(&blk.w_fc2.t());
    du.zip_mut_with(&cache.u, |g, &u| *g *= gelu_grad(u));
    add_at_b(&mut grad.w_fc1, &cache.m.view(), &du.view());
    add_col_sums(&mut grad.b_fc1, &du.view());
    let dm = du.dot(&blk.w_fc1.t());
    let mut dh1 = layer_norm_backward(&dm.view(), &cache.ln2, &blk.ln2_g, &mut grad.ln2_g, &mut grad.ln2_b);
    dh1 += dout;

    // attention branch
    add_at_b(&mut grad.w_o, &cache.o.view(), &dh1.view());
    add_col_sums(&mut grad.b_o, &dh1.view());
    let d_o = dh1.dot(&blk.w_o.t());
    let mut dqkv = Array2::zeros((n, 3 * d));
    for head in 0..n_heads {
        let cols = head * dh..(head + 1) * dh;
        let q = cache.qkv.slice(s![.., cols.clone()]);
        let k = cache.qkv.slice(s![.., d + cols.start..d + cols.end]);
        let v = cache.qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
        let p = &cache.probs[head];
        let doh = d_o.slice(s![.., cols.clone()]);
        let dp = doh.dot(&v.t());
        dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end])
            .assign(&p.t().dot(&doh));
        let mut ds = dp;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot: f64 = row.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
            for (x, pv) in row.iter_mut().zip(prow.iter()) {
                *x = pv * (*x - dot) * scale;
            }
        }
        dqkv.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&k));
        dqkv.slice_mut(s![.., d + cols.start..d + cols.end])
            .assign(&ds.t().dot(&q));
    }
    add_at_b(&mut grad.w_qkv, &cache.a.view(), &dqkv.view());
    add_col_sums(&mut grad.b_qkv, &dqkv.view());
    let da = dqkv.dot(&blk.w_qkv.t());
    let mut dh = layer_norm_backward(&da.view(), &cache.ln1, &blk.ln1_g, &mut grad.ln1_g, &mut grad.ln1_b);
    dh += &dh1;
    dh
}

/// Token matrix before the first block: class token then projected
/// patches, plus position embeddings.
pub fn embed_patches(params: &EncoderParams, patches: &Array2<f64>) -> Array2<f64> {
    let n = params.dims.n_tokens();
    let d = params.dims.d_model;
    let mut h = Array2::zeros((n, d));
    h.row_mut(0).assign(&params.cls);
    let e = patches.dot(&params.patch_w) + &params.patch_b;
    h.slice_mut(s![1.., ..]).assign(&e);
    h += &params.pos;
    h
}

/// Where a forward pass starts.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    Clip(&'a Clip),
    /// Token matrix entering block `start_block`, e.g. a cached output of
    /// frozen lower layers.
    Hidden {
        tokens: &'a Array2<f64>,
        start_block: usize,
    },
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    patches: Option<Array2<f64>>,
    start_block: usize,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
}

/// Runs the embedding (when given a clip) and blocks up to, not including,
/// `end_block`, without caching.
pub fn hidden_through(params: &EncoderParams, clip: &Clip, end_block: usize) -> Result<Array2<f64>> {
    let patches = patchify(&params.dims, clip)?;
    let mut h = embed_patches(params, &patches);
    for blk in &params.blocks[..end_block] {
        h = block_forward(blk, &h, params.dims.n_heads).0;
    }
    Ok(h)
}

fn run(params: &EncoderParams, input: EncoderInput<'_>, keep_cache: bool) -> Result<(Array1<f64>, Option<ForwardCache>)> {
    let (mut h, patches, start_block) = match input {
        EncoderInput::Clip(clip) => {
            let patches = patchify(&params.dims, clip)?;
            (embed_patches(params, &patches), Some(patches), 0)
        }
        EncoderInput::Hidden { tokens, start_block } => {
            if tokens.dim() != (params.dims.n_tokens(), params.dims.d_model) || start_block > params.dims.n_blocks {
                return Err(Error::DimensionMismatch {
                    axis: "hidden tokens".into(),
                    expected: params.dims.n_tokens(),
                    actual: tokens.nrows(),
                });
            }
            (tokens.clone(), None, start_block)
        }
    };
    let mut caches = Vec::with_capacity(params.dims.n_blocks - start_block);
    for blk in &params.blocks[start_block..] {
        let (next, cache) = block_forward(blk, &h, params.dims.n_heads);
        if keep_cache {
            caches.push(cache);
        }
        h = next;
    }
    let cls_row = h.slice(s![0..1, ..]).to_owned();
    let (z, final_ln) = layer_norm(&cls_row, &params.norm_g, &params.norm_b);
    let z = z.row(0).to_owned();
    let cache = keep_cache.then(|| ForwardCache {
        patches: if keep_cache { patches } else { None },
        start_block,
        blocks: caches,
        final_ln,
    });
    Ok((z, cache))
}

/// The class-token representation `z` of a clip.
pub fn encode(clip: &Clip, params: &EncoderParams) -> Result<Array1<f64>> {
    Ok(run(params, EncoderInput::Clip(clip), false)?.0)
}

pub fn encode_input(params: &EncoderParams, input: EncoderInput<'_>) -> Result<Array1<f64>> {
    Ok(run(params, input, false)?.0)
}

pub fn encode_with_cache(params: &EncoderParams, input: EncoderInput<'_>) -> Result<(Array1<f64>, ForwardCache)> {
    let (z, cache) = run(params, input, true)?;
    Ok((z, cache.expect("cache requested")))
}

/// Backpropagates `dz` through the encoder, accumulating into `grad`.
///
/// Gradients are produced only for blocks at or above `lowest_block`; the
/// embedding receives gradients only when `lowest_block == 0`,
/// `embedding` is set and the pass started from a clip.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    dz: ArrayView1<f64>,
    grad: &mut EncoderParams,
    lowest_block: usize,
    embedding: bool,
) {
    let n = params.dims.n_tokens();
    let d = params.dims.d_model;
    let dz2 = dz.to_owned().into_shape_with_order((1, d)).expect("row vector");
    let dcls = layer_norm_backward(&dz2.view(), &cache.final_ln, &params.norm_g, &mut grad.norm_g, &mut grad.norm_b);
    let mut dh = Array2::zeros((n, d));
    dh.row_mut(0).assign(&dcls.row(0));

    let lowest = lowest_block.max(cache.start_block);
    for (i, blk_cache) in cache.blocks.iter().enumerate().rev() {
        let b = cache.start_block + i;
        if b < lowest {
            break;
        }
        dh = block_backward(&params.blocks[b], blk_cache, &dh, params.dims.n_heads, &mut grad.blocks[b]);
    }
    if embedding && lowest == 0 {
        if let Some(patches) = &cache.patches {
            grad.cls += &dh.row(0);
            grad.pos += &dh;
            let de = dh.slice(s![1.., ..]);
            add_at_b(&mut grad.patch_w, &patches.view(), &de);
            add_col_sums(&mut grad.patch_b, &de);
        }
    }
}

/// Classifier logits for one embedding.
pub fn classify(z: &Array1<f64>, params: &EncoderParams) -> Array1<f64> {
    z.dot(&params.cls_w) + &params.cls_b
}

/// `B×K` logits for a batch of embeddings.
pub fn classify_batch(z: &Array2<f64>, params: &EncoderParams) -> Array2<f64> {
    z.dot(&params.cls_w) + &params.cls_b
}

/// Returns `dZ`; accumulates classifier gradients.
pub fn classify_backward(z: &Array2<f64>, dlogits: &Array2<f64>, params: &EncoderParams, grad: &mut EncoderParams) -> Array2<f64> {
    add_at_b(&mut grad.cls_w, &z.view(), &dlogits.view());
    add_col_sums(&mut grad.cls_b, &dlogits.view());
    dlogits.dot(&params.cls_w.t())
}

/// Unit-norm projections with the state needed for backward.
#[derive(Clone, Debug)]
pub struct Projection {
    pub p: Array2<f64>,
    /// Rows whose pre-normalization vector was zero; they fall back to the
    /// first basis vector.
    pub n_degenerate: usize,
    u: Array2<f64>,
    hidden: Array2<f64>,
    norms: Array1<f64>,
}

/// MLP with one GELU then L2 normalization, applied row-wise.
pub fn project_batch(z: &Array2<f64>, params: &EncoderParams) -> Projection {
    let u = z.dot(&params.proj_w1) + &params.proj_b1;
    let hidden = u.mapv(gelu);
    let mut p = hidden.dot(&params.proj_w2) + &params.proj_b2;
    let mut norms = Array1::zeros(p.nrows());
    let mut n_degenerate = 0;
    for (mut row, nrm) in p.rows_mut().into_iter().zip(norms.iter_mut()) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        *nrm = norm;
        if norm > 0.0 && norm.is_finite() {
            row.mapv_inplace(|v| v / norm);
        } else {
            n_degenerate += 1;
            row.fill(0.0);
            row[0] = 1.0;
        }
    }
    Projection {
        p,
        n_degenerate,
        u,
        hidden,
        norms,
    }
}

pub fn project(z: &Array1<f64>, params: &EncoderParams) -> (Array1<f64>, bool) {
    let zb = z.view().insert_axis(Axis(0)).to_owned();
    let out = project_batch(&zb, params);
    (out.p.row(0).to_owned(), out.n_degenerate > 0)
}

/// Returns `dZ`; accumulates projector gradients. Degenerate rows pass no
/// gradient.
pub fn project_backward(z: &Array2<f64>, proj: &Projection, dp: &Array2<f64>, params: &EncoderParams, grad: &mut EncoderParams) -> Array2<f64> {
    let mut dpre = dp.clone();
    for (((mut row, prow), &norm), _) in dpre
        .rows_mut()
        .into_iter()
        .zip(proj.p.rows())
        .zip(proj.norms.iter())
        .zip(0..)
    {
        if !(norm > 0.0 && norm.is_finite()) {
            row.fill(0.0);
            continue;
        }
        let dot: f64 = row.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
        for (g, pv) in row.iter_mut().zip(prow.iter()) {
            *g = (*g - pv * dot) / norm;
        }
    }
    add_at_b(&mut grad.proj_w2, &proj.hidden.view(), &dpre.view());
    add_col_sums(&mut grad.proj_b2, &dpre.view());
    let mut du = dpre.dot(&params.proj_w2.t());
    du.zip_mut_with(&proj.u, |g, &u| *g *= gelu_grad(u));
    add_at_b(&mut grad.proj_w1, &z.view(), &du.view());
    add_col_sums(&mut grad.proj_b1, &du.view());
    du.dot(&params.proj_w1.t())
}
