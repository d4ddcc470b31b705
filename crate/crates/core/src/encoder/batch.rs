use ndarray::{Array1, Array2};
use rayon::prelude::*;

use super::model::{encode_input, encode_with_cache, encoder_backward, EncoderInput, ForwardCache};
use super::params::EncoderParams;
use crate::error::Result;

/// Clips per reduction chunk. Fixed so that summation order, and therefore
/// every bit of the result, does not depend on the number of threads.
pub const CHUNK: usize = 8;

fn stack(rows: Vec<Array1<f64>>, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    out
}

/// Embeds every input; row `i` belongs to `inputs[i]`.
pub fn encode_batch(params: &EncoderParams, inputs: &[EncoderInput<'_>]) -> Result<Array2<f64>> {
    let rows = inputs
        .par_iter()
        .map(|inp| encode_input(params, *inp))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(rows, params.dims.d_model))
}

/// As [`encode_batch`], keeping what backward needs.
pub fn encode_batch_with_cache(params: &EncoderParams, inputs: &[EncoderInput<'_>]) -> Result<(Array2<f64>, Vec<ForwardCache>)> {
    let out = inputs
        .par_iter()
        .map(|inp| encode_with_cache(params, *inp))
        .collect::<Result<Vec<_>>>()?;
    let (rows, caches): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((stack(rows, params.dims.d_model), caches))
}

/// Sum over clips of the encoder gradient given `dz` (one row per clip).
pub fn backward_batch(
    params: &EncoderParams,
    caches: &[ForwardCache],
    dz: &Array2<f64>,
    lowest_block: usize,
    embedding: bool,
) -> EncoderParams {
    let chunk_grads: Vec<EncoderParams> = caches
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = params.zeros_like();
            for (j, cache) in chunk.iter().enumerate() {
                let row = dz.row(c * CHUNK + j);
                if row.iter().all(|v| *v == 0.0) {
                    continue;
                }
                encoder_backward(params, cache, row, &mut g, lowest_block, embedding);
            }
            g
        })
        .collect();
    let mut total = params.zeros_like();
    for g in &chunk_grads {
        total.add_assign(g);
    }
    total
}
