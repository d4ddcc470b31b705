//! Central finite-difference checks of every analytic gradient.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::domain::{Clip, ClipDims, ModalityId, ViewId, ViewRole, DomainRole};
use crate::encoder::{
    backward_batch, classify_backward, classify_batch, encode_batch, encode_batch_with_cache, EncoderDims, EncoderInput,
    EncoderParams,
};
use crate::error::Result;
use crate::objectives::{cross_entropy, ib_loss, supcon_loss};
use crate::rng::{substream, StreamRng};

pub const FD_STEP: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const COMPOSITION_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the element-wise relative error, so entries whose
/// true gradient is numerically zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, REL_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

pub fn max_abs_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + FD_STEP;
        let plus = f(&buf);
        buf[i] = orig - FD_STEP;
        let minus = f(&buf);
        buf[i] = orig;
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub instance: usize,
    pub n_values: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(check: &str, instance: usize, analytic: &[f64], numeric: &[f64], tolerance: f64) -> Self {
        let max_rel_error = max_relative_error(analytic, numeric);
        Self {
            check: check.into(),
            instance,
            n_values: analytic.len(),
            max_rel_error,
            max_abs_error: max_abs_error(analytic, numeric),
            tolerance,
            passed: max_rel_error < tolerance && max_rel_error.is_finite(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub fd_step: f64,
    pub results: Vec<CheckResult>,
    pub passed: bool,
}

impl GradcheckReport {
    /// Worst relative error per check name.
    pub fn worst(&self, check: &str) -> f64 {
        self.results
            .iter()
            .filter(|r| r.check == check)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }
}

fn random_matrix(rng: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.random_range(-1.0..1.0))
}

fn as_matrix(flat: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), flat.to_vec()).expect("shape")
}

fn normalize_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    out
}

pub fn check_cross_entropy(rng: &mut StreamRng, instance: usize) -> Result<CheckResult> {
    let b = rng.random_range(1..=8);
    let k = rng.random_range(2..=6);
    let logits = random_matrix(rng, b, k, 3.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let analytic = cross_entropy(&logits.view(), &labels)?.grad;
    let numeric = numeric_gradient(logits.as_slice().unwrap(), |x| {
        cross_entropy(&as_matrix(x, b, k).view(), &labels).unwrap().loss.value
    });
    Ok(CheckResult::new("cross_entropy", instance, analytic.as_slice().unwrap(), &numeric, LOSS_TOLERANCE))
}

/// Differentiates `x ↦ supcon(normalize(x))` at a point on the unit
/// sphere, which compares the tangential part of the analytic gradient.
pub fn check_supcon(rng: &mut StreamRng, instance: usize) -> Result<CheckResult> {
    let b = rng.random_range(1..=4);
    let n = 2 * b;
    let d = rng.random_range(2..=8);
    let tau = rng.random_range(0.1..1.0);
    let n_classes = rng.random_range(1..=3);
    let mut labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n_classes)).collect();
    labels.extend(labels.clone());
    let p = normalize_rows(&random_matrix(rng, n, d, 1.0).view());
    let g = supcon_loss(&p.view(), &labels, tau)?.grad;
    let mut analytic = g.clone();
    for (mut row, prow) in analytic.rows_mut().into_iter().zip(p.rows()) {
        let dot = row.dot(&prow);
        row.scaled_add(-dot, &prow);
    }
    let numeric = numeric_gradient(p.as_slice().unwrap(), |x| {
        let q = normalize_rows(&as_matrix(x, n, d).view());
        supcon_loss(&q.view(), &labels, tau).unwrap().loss.value
    });
    Ok(CheckResult::new("supcon", instance, analytic.as_slice().unwrap(), &numeric, LOSS_TOLERANCE))
}

pub fn check_ib(rng: &mut StreamRng, instance: usize) -> Result<CheckResult> {
    let n = rng.random_range(3..=8);
    let d = rng.random_range(1..=8);
    let lambda = rng.random_range(0.0..0.5);
    let s = random_matrix(rng, n, d, 1.0);
    let t = &s * 0.5 + &random_matrix(rng, n, d, 1.0);
    let out = ib_loss(&s.view(), &t.view(), lambda)?;
    let mut analytic = out.grad_source.as_slice().unwrap().to_vec();
    analytic.extend_from_slice(out.grad_target.as_slice().unwrap());
    let mut x = s.as_slice().unwrap().to_vec();
    x.extend_from_slice(t.as_slice().unwrap());
    let numeric = numeric_gradient(&x, |x| {
        let (a, b) = x.split_at(n * d);
        ib_loss(&as_matrix(a, n, d).view(), &as_matrix(b, n, d).view(), lambda)
            .unwrap()
            .loss
            .value
    });
    Ok(CheckResult::new("ib", instance, &analytic, &numeric, LOSS_TOLERANCE))
}

/// The small configuration used for end-to-end checks.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        num_classes: 4,
        frames: 2,
        height: 8,
        width: 8,
        channels: 3,
        d_model: 8,
        n_blocks: 2,
        n_heads: 2,
        patch_t: 1,
        patch_hw: 4,
        d_proj: 4,
        ..Default::default()
    }
}

pub fn random_clip(rng: &mut StreamRng, dims: ClipDims, class_id: usize, clip_id: usize) -> Result<Clip> {
    let data: Vec<f32> = (0..dims.len()).map(|_| rng.random_range(0.0f32..1.0)).collect();
    Clip::new(
        data,
        dims,
        ViewId::new(1, ViewRole::Anchor),
        ModalityId::new(0, "modA", DomainRole::Source),
        Some(class_id),
        format!("random_{clip_id}"),
        (0, dims.frames as i64),
    )
}

fn composition_loss(params: &EncoderParams, clips: &[Clip], labels: &[usize]) -> f64 {
    let inputs: Vec<EncoderInput> = clips.iter().map(EncoderInput::Clip).collect();
    let z = encode_batch(params, &inputs).unwrap();
    cross_entropy(&classify_batch(&z, params).view(), labels).unwrap().loss.value
}

/// encode → classify → cross-entropy over every parameter.
pub fn check_composition(rng: &mut StreamRng, instance: usize) -> Result<CheckResult> {
    let dims = EncoderDims::from_config(&tiny_config());
    let params = EncoderParams::random_dense(dims, 0.3, rng)?;
    let b = rng.random_range(1..=3);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..dims.num_classes)).collect();
    let clips = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| random_clip(rng, dims.clip, y, i))
        .collect::<Result<Vec<_>>>()?;

    let inputs: Vec<EncoderInput> = clips.iter().map(EncoderInput::Clip).collect();
    let (z, caches) = encode_batch_with_cache(&params, &inputs)?;
    let ce = cross_entropy(&classify_batch(&z, &params).view(), &labels)?;
    let mut grad = params.zeros_like();
    let dz = classify_backward(&z, &ce.grad, &params, &mut grad);
    grad.add_assign(&backward_batch(&params, &caches, &dz, 0, true));

    let mut probe = params.clone();
    let numeric = numeric_gradient(&params.flatten(), |x| {
        probe.unflatten_from(x);
        composition_loss(&probe, &clips, &labels)
    });
    Ok(CheckResult::new("composition", instance, &grad.flatten(), &numeric, COMPOSITION_TOLERANCE))
}

/// `instances` random cases of each check, each on its own substream.
pub fn run_suite(seed: u64, instances: usize) -> Result<GradcheckReport> {
    type Check = fn(&mut StreamRng, usize) -> Result<CheckResult>;
    let checks: [(&str, Check); 4] = [
        ("cross_entropy", check_cross_entropy),
        ("supcon", check_supcon),
        ("ib", check_ib),
        ("composition", check_composition),
    ];
    let mut results = Vec::new();
    for (name, check) in checks {
        for i in 0..instances {
            results.push(check(&mut substream(seed, &format!("gradcheck.{name}"), i as u64), i)?);
        }
    }
    let passed = results.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        seed,
        fd_step: FD_STEP,
        results,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_check_passes_once() {
        for (i, check) in [check_cross_entropy, check_supcon, check_ib, check_composition].iter().enumerate() {
            let r = check(&mut substream(5, "unit", i as u64), 0).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}
