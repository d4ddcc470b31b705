use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::domain::ClipDims;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Hidden width of each block's MLP relative to `d_model`.
pub const MLP_RATIO: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub clip: ClipDims,
    pub patch_t: usize,
    pub patch_hw: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub num_classes: usize,
    pub d_proj: usize,
}

impl EncoderDims {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            clip: cfg.clip_dims(),
            patch_t: cfg.patch_t,
            patch_hw: cfg.patch_hw,
            d_model: cfg.d_model,
            n_blocks: cfg.n_blocks,
            n_heads: cfg.n_heads,
            d_ff: MLP_RATIO * cfg.d_model,
            num_classes: cfg.num_classes,
            d_proj: cfg.d_proj,
        }
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (
            self.clip.frames / self.patch_t,
            self.clip.height / self.patch_hw,
            self.clip.width / self.patch_hw,
        )
    }

    pub fn n_patches(&self) -> usize {
        let (a, b, c) = self.grid();
        a * b * c
    }

    /// Patches plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_t * self.patch_hw * self.patch_hw * self.clip.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn check(&self) -> Result<()> {
        let c = &self.clip;
        for (axis, size, patch) in [
            ("frames", c.frames, self.patch_t),
            ("height", c.height, self.patch_hw),
            ("width", c.width, self.patch_hw),
        ] {
            if patch == 0 || size % patch != 0 || size == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{axis} ({size}) must be a positive multiple of the patch size ({patch})"
                )));
            }
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument("d_model must be divisible by n_heads".into()));
        }
        Ok(())
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    /// Patch projection, position table and class token.
    Embedding,
    Block(usize),
    FinalNorm,
    Classifier,
    Projector,
}

impl Layer {
    /// Dense layer index: embedding 0, blocks `1..=n`, then final norm,
    /// classifier and projector.
    pub fn index(self, n_blocks: usize) -> usize {
        match self {
            Layer::Embedding => 0,
            Layer::Block(i) => 1 + i,
            Layer::FinalNorm => n_blocks + 1,
            Layer::Classifier => n_blocks + 2,
            Layer::Projector => n_blocks + 3,
        }
    }

    pub fn from_index(index: usize, n_blocks: usize) -> Option<Layer> {
        match index {
            0 => Some(Layer::Embedding),
            i if i <= n_blocks => Some(Layer::Block(i - 1)),
            i if i == n_blocks + 1 => Some(Layer::FinalNorm),
            i if i == n_blocks + 2 => Some(Layer::Classifier),
            i if i == n_blocks + 3 => Some(Layer::Projector),
            _ => None,
        }
    }

    pub fn count(n_blocks: usize) -> usize {
        n_blocks + 4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub layer: Layer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    /// `d × 3d`: query, key and value projections side by side.
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_fc1: Array2<f64>,
    pub b_fc1: Array1<f64>,
    pub w_fc2: Array2<f64>,
    pub b_fc2: Array1<f64>,
}

/// Encoder, classifier head and projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    pub pos: Array2<f64>,
    pub cls: Array1<f64>,
    pub blocks: Vec<Block>,
    pub norm_g: Array1<f64>,
    pub norm_b: Array1<f64>,
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
    pub proj_w1: Array2<f64>,
    pub proj_b1: Array1<f64>,
    pub proj_w2: Array2<f64>,
    pub proj_b2: Array1<f64>,
}

/// Normal(0, σ²) redrawn until it falls within two standard deviations.
fn trunc_normal(rng: &mut StreamRng, sigma: f64) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return v * sigma;
        }
    }
}

/// Shape accessor with the same call shape as `as_slice`, so the tensor
/// table macro can list shapes too.
trait ShapeVec {
    fn shape_vec(&self) -> Option<Vec<usize>>;
}

impl<S: ndarray::Data, D: ndarray::Dimension> ShapeVec for ndarray::ArrayBase<S, D> {
    fn shape_vec(&self) -> Option<Vec<usize>> {
        Some(self.shape().to_vec())
    }
}

macro_rules! param_table {
    ($p:expr, $slice:ident, $iter:ident) => {{
        let mut out = Vec::with_capacity(10 + 12 * $p.blocks.len());
        let info = |name: &str, layer: Layer| ParamInfo { name: name.to_string(), layer };
        out.push((info("patch_embed.weight", Layer::Embedding), $p.patch_w.$slice().unwrap()));
        out.push((info("patch_embed.bias", Layer::Embedding), $p.patch_b.$slice().unwrap()));
        out.push((info("pos_embed", Layer::Embedding), $p.pos.$slice().unwrap()));
        out.push((info("cls_token", Layer::Embedding), $p.cls.$slice().unwrap()));
        for (i, b) in $p.blocks.$iter().enumerate() {
            let layer = Layer::Block(i);
            let name = |s: &str| info(&format!("blocks.{i}.{s}"), layer);
            out.push((name("norm1.gain"), b.ln1_g.$slice().unwrap()));
            out.push((name("norm1.bias"), b.ln1_b.$slice().unwrap()));
            out.push((name("attn.qkv.weight"), b.w_qkv.$slice().unwrap()));
            out.push((name("attn.qkv.bias"), b.b_qkv.$slice().unwrap()));
            out.push((name("attn.out.weight"), b.w_o.$slice().unwrap()));
            out.push((name("attn.out.bias"), b.b_o.$slice().unwrap()));
            out.push((name("norm2.gain"), b.ln2_g.$slice().unwrap()));
            out.push((name("norm2.bias"), b.ln2_b.$slice().unwrap()));
            out.push((name("mlp.fc1.weight"), b.w_fc1.$slice().unwrap()));
            out.push((name("mlp.fc1.bias"), b.b_fc1.$slice().unwrap()));
            out.push((name("mlp.fc2.weight"), b.w_fc2.$slice().unwrap()));
            out.push((name("mlp.fc2.bias"), b.b_fc2.$slice().unwrap()));
        }
        out.push((info("norm.gain", Layer::FinalNorm), $p.norm_g.$slice().unwrap()));
        out.push((info("norm.bias", Layer::FinalNorm), $p.norm_b.$slice().unwrap()));
        out.push((info("classifier.weight", Layer::Classifier), $p.cls_w.$slice().unwrap()));
        out.push((info("classifier.bias", Layer::Classifier), $p.cls_b.$slice().unwrap()));
        out.push((info("projector.fc1.weight", Layer::Projector), $p.proj_w1.$slice().unwrap()));
        out.push((info("projector.fc1.bias", Layer::Projector), $p.proj_b1.$slice().unwrap()));
        out.push((info("projector.fc2.weight", Layer::Projector), $p.proj_w2.$slice().unwrap()));
        out.push((info("projector.fc2.bias", Layer::Projector), $p.proj_b2.$slice().unwrap()));
        out
    }};
}

impl EncoderParams {
    /// All-zero parameters (LayerNorm gains included).
    pub fn zeros(dims: EncoderDims) -> Self {
        let d = dims.d_model;
        let block = Block {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w_qkv: Array2::zeros((d, 3 * d)),
            b_qkv: Array1::zeros(3 * d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w_fc1: Array2::zeros((d, dims.d_ff)),
            b_fc1: Array1::zeros(dims.d_ff),
            w_fc2: Array2::zeros((dims.d_ff, d)),
            b_fc2: Array1::zeros(d),
        };
        Self {
            dims,
            patch_w: Array2::zeros((dims.patch_dim(), d)),
            patch_b: Array1::zeros(d),
            pos: Array2::zeros((dims.n_tokens(), d)),
            cls: Array1::zeros(d),
            blocks: vec![block; dims.n_blocks],
            norm_g: Array1::zeros(d),
            norm_b: Array1::zeros(d),
            cls_w: Array2::zeros((d, dims.num_classes)),
            cls_b: Array1::zeros(dims.num_classes),
            proj_w1: Array2::zeros((d, d)),
            proj_b1: Array1::zeros(d),
            proj_w2: Array2::zeros((d, dims.d_proj)),
            proj_b2: Array1::zeros(dims.d_proj),
        }
    }

    /// Truncated-normal (σ = 0.02) weights, zero biases and class token,
    /// unit LayerNorm gains.
    pub fn init(dims: EncoderDims, rng: &mut StreamRng) -> Result<Self> {
        Self::init_with_scale(dims, 0.02, rng)
    }

    /// As [`init`](Self::init) with a custom weight scale.
    pub fn init_with_scale(dims: EncoderDims, sigma: f64, rng: &mut StreamRng) -> Result<Self> {
        dims.check()?;
        let mut p = Self::zeros(dims);
        for (info, data) in p.tensors_mut() {
            let is_gain = info.name.ends_with(".gain");
            let is_weight = info.name.ends_with(".weight") || info.name == "pos_embed";
            for v in data.iter_mut() {
                *v = if is_gain {
                    1.0
                } else if is_weight {
                    trunc_normal(rng, sigma)
                } else {
                    0.0
                };
            }
        }
        Ok(p)
    }

    /// Every entry uniform in `±sigma`, gains around one. Used for
    /// gradient checks where zero biases would hide errors.
    pub fn random_dense(dims: EncoderDims, sigma: f64, rng: &mut StreamRng) -> Result<Self> {
        dims.check()?;
        let mut p = Self::zeros(dims);
        for (info, data) in p.tensors_mut() {
            let base = if info.name.ends_with(".gain") { 1.0 } else { 0.0 };
            for v in data.iter_mut() {
                *v = base + sigma * rng.random_range(-1.0..1.0);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    /// Every tensor with its name and layer, in a fixed order.
    pub fn tensors(&self) -> Vec<(ParamInfo, &[f64])> {
        param_table!(self, as_slice, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamInfo, &mut [f64])> {
        param_table!(self, as_slice_mut, iter_mut)
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let table: Vec<(ParamInfo, Vec<usize>)> = param_table!(self, shape_vec, iter);
        table.into_iter().map(|(_, s)| s).collect()
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, d)| d.len()).sum()
    }

    pub fn infos(&self) -> Vec<ParamInfo> {
        self.tensors().into_iter().map(|(info, _)| info).collect()
    }

    /// Flattened copy of every parameter in visiting order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, d)| d.iter().copied()).collect()
    }

    pub fn unflatten_from(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, d) in self.tensors_mut() {
            d.copy_from_slice(&flat[offset..offset + d.len()]);
            offset += d.len();
        }
    }
}
