use std::collections::BTreeSet;

use super::params::{EncoderParams, Layer};
use crate::error::{Error, Result};

/// Layers whose parameters stay fixed during phase 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    n_blocks: usize,
    frozen: BTreeSet<Layer>,
}

impl FreezeMask {
    /// Nothing frozen.
    pub fn none(n_blocks: usize) -> Self {
        Self {
            n_blocks,
            frozen: BTreeSet::new(),
        }
    }

    /// The embedding plus the lowest `⌊fraction · n_blocks⌋` blocks.
    pub fn from_fraction(n_blocks: usize, fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument("freeze_fraction ∈ [0,1]".into()));
        }
        let k = ((fraction * n_blocks as f64).floor() as usize).min(n_blocks);
        let mut frozen = BTreeSet::from([Layer::Embedding]);
        frozen.extend((0..k).map(Layer::Block));
        Ok(Self { n_blocks, frozen })
    }

    /// From dense layer indices (see [`Layer::index`]). Heads cannot be
    /// frozen.
    pub fn from_layer_indices(n_blocks: usize, indices: &[usize]) -> Result<Self> {
        let mut frozen = BTreeSet::new();
        for &i in indices {
            match Layer::from_index(i, n_blocks) {
                Some(layer @ (Layer::Embedding | Layer::Block(_) | Layer::FinalNorm)) => {
                    frozen.insert(layer);
                }
                Some(Layer::Classifier | Layer::Projector) => {
                    return Err(Error::InvalidArgument(format!("layer {i} is a head and stays trainable")));
                }
                None => return Err(Error::UnknownLayer(i)),
            }
        }
        Ok(Self { n_blocks, frozen })
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn is_frozen(&self, layer: Layer) -> bool {
        self.frozen.contains(&layer)
    }

    pub fn frozen_layers(&self) -> impl Iterator<Item = Layer> + '_ {
        self.frozen.iter().copied()
    }

    /// Gradients are never needed below this block.
    pub fn lowest_trainable_block(&self) -> usize {
        (0..self.n_blocks)
            .find(|&b| !self.is_frozen(Layer::Block(b)))
            .unwrap_or(self.n_blocks)
    }

    /// Number of leading blocks whose output is a pure function of the
    /// clip, i.e. cacheable across steps.
    pub fn frozen_prefix(&self) -> usize {
        if !self.is_frozen(Layer::Embedding) {
            return 0;
        }
        self.lowest_trainable_block()
    }

    pub fn embedding_trainable(&self) -> bool {
        !self.is_frozen(Layer::Embedding)
    }
}

/// Parameters paired with the mask that governs which of them an optimizer
/// may touch.
#[derive(Clone, Debug)]
pub struct TrainingView {
    pub params: EncoderParams,
    pub mask: FreezeMask,
}

impl TrainingView {
    /// Per-tensor trainability flags in [`EncoderParams::tensors`] order.
    pub fn trainable_flags(&self) -> Vec<bool> {
        self.params
            .infos()
            .iter()
            .map(|info| !self.mask.is_frozen(info.layer))
            .collect()
    }
}

pub fn apply_freeze(params: EncoderParams, mask: FreezeMask) -> Result<TrainingView> {
    if mask.n_blocks != params.dims.n_blocks {
        return Err(Error::DimensionMismatch {
            axis: "n_blocks".into(),
            expected: params.dims.n_blocks,
            actual: mask.n_blocks,
        });
    }
    if let Some(Layer::Block(b)) = mask.frozen.iter().find(|l| matches!(l, Layer::Block(b) if *b >= mask.n_blocks)) {
        return Err(Error::UnknownLayer(Layer::Block(*b).index(mask.n_blocks)));
    }
    Ok(TrainingView { params, mask })
}
