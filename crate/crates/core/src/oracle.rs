//! Compares the vectorized losses, metrics and encoder against the loop
//! implementations in [`crate::reference`] on random instances.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{classify, encode, project, EncoderDims, EncoderParams};
use crate::error::Result;
use crate::eval::topk_accuracy;
use crate::gradcheck::{random_clip, tiny_config};
use crate::objectives::{cross_entropy, ib_loss, supcon_loss};
use crate::reference;
use crate::rng::{substream, StreamRng};

pub const LOSS_TOLERANCE: f64 = 1e-9;
pub const ENCODER_REL_TOLERANCE: f64 = 1e-5;
pub const HEAD_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub check: String,
    pub instances: usize,
    /// Largest deviation seen; for `topk` the count of mismatches.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn random_matrix(rng: &mut StreamRng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| scale * rng.random_range(-1.0..1.0))
}

pub fn ce_error(rng: &mut StreamRng) -> Result<f64> {
    let b = rng.random_range(1..=8);
    let k = rng.random_range(2..=6);
    let logits = random_matrix(rng, b, k, 5.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let got = cross_entropy(&logits.view(), &labels)?.loss.value;
    Ok((got - reference::cross_entropy(&rows(&logits), &labels)).abs())
}

pub fn supcon_error(rng: &mut StreamRng) -> Result<f64> {
    let b = rng.random_range(1..=4);
    let d = rng.random_range(1..=8);
    let tau = rng.random_range(0.05..1.0);
    let mut labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
    labels.extend(labels.clone());
    let mut p = random_matrix(rng, 2 * b, d, 1.0);
    for mut row in p.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    let got = supcon_loss(&p.view(), &labels, tau)?.loss.value;
    let want = reference::supcon(&rows(&p), &labels, tau).expect("duplicated labels give positives");
    Ok((got - want).abs())
}

pub fn ib_error(rng: &mut StreamRng) -> Result<f64> {
    let n = rng.random_range(2..=8);
    let d = rng.random_range(1..=8);
    let lambda = rng.random_range(0.0..0.1);
    let s = random_matrix(rng, n, d, 2.0);
    let t = random_matrix(rng, n, d, 2.0);
    let got = ib_loss(&s.view(), &t.view(), lambda)?.loss.value;
    Ok((got - reference::ib(&rows(&s), &rows(&t), lambda)).abs())
}

/// 1 on mismatch. Logits are rounded to a coarse grid so ties occur.
pub fn topk_error(rng: &mut StreamRng) -> Result<f64> {
    let n = rng.random_range(1..=20);
    let k_classes = rng.random_range(2..=6);
    let k = rng.random_range(1..=k_classes);
    let logits = random_matrix(rng, n, k_classes, 2.0).mapv(|v| v.round());
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k_classes)).collect();
    let got = topk_accuracy(&logits.view(), &labels, k)?;
    let want = reference::topk_accuracy(&rows(&logits), &labels, k);
    Ok(if got == want { 0.0 } else { 1.0 })
}

/// Largest relative deviation of the class-token embedding, then the
/// largest absolute deviation of logits and projection.
pub fn encoder_errors(rng: &mut StreamRng) -> Result<(f64, f64)> {
    let dims = EncoderDims::from_config(&tiny_config());
    let params = EncoderParams::random_dense(dims, 0.3, rng)?;
    let clip = random_clip(rng, dims.clip, 0, 0)?;
    let z = encode(&clip, &params)?;
    let want = reference::encode(&clip, &params);
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let z_err = z.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
    let logits = classify(&z, &params);
    let (p, _) = project(&z, &params);
    let zv = z.to_vec();
    let head_err = logits
        .iter()
        .zip(reference::classify(&zv, &params))
        .chain(p.iter().zip(reference::project(&zv, &params)))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((z_err, head_err))
}

fn summarize(check: &str, errors: &[f64], tolerance: f64, strict_zero: bool) -> OracleSummary {
    let max_error = errors.iter().cloned().fold(0.0, f64::max);
    OracleSummary {
        check: check.into(),
        instances: errors.len(),
        max_error,
        tolerance,
        passed: if strict_zero { max_error == 0.0 } else { max_error <= tolerance },
    }
}

/// `instances` random cases per loss and metric, plus a smaller number of
/// encoder forward comparisons.
pub fn run_oracle_suite(seed: u64, instances: usize) -> Result<Vec<OracleSummary>> {
    type Check = fn(&mut StreamRng) -> Result<f64>;
    let checks: [(&str, Check); 3] = [("cross_entropy", ce_error), ("supcon", supcon_error), ("ib", ib_error)];
    let mut out = Vec::new();
    for (name, check) in checks {
        let errs = (0..instances)
            .map(|i| check(&mut substream(seed, &format!("oracle.{name}"), i as u64)))
            .collect::<Result<Vec<_>>>()?;
        out.push(summarize(name, &errs, LOSS_TOLERANCE, false));
    }
    let errs = (0..instances)
        .map(|i| topk_error(&mut substream(seed, "oracle.topk", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    out.push(summarize("topk", &errs, 0.0, true));

    let n_enc = instances.clamp(1, 10);
    let pairs = (0..n_enc)
        .map(|i| encoder_errors(&mut substream(seed, "oracle.encoder", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let z: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let heads: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    out.push(summarize("encode", &z, ENCODER_REL_TOLERANCE, false));
    out.push(summarize("heads", &heads, HEAD_TOLERANCE, false));
    Ok(out)
}
