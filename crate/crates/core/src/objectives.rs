//! Loss functions with analytic gradients.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Standard-deviation floor used when standardizing features.
pub const STD_FLOOR: f64 = 1e-8;

/// A scalar loss and its named sub-terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn single(name: &str, value: f64) -> Self {
        Self {
            value,
            components: BTreeMap::from([(name.to_string(), value)]),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }
}

#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub loss: LossValue,
    pub grad: Array2<f64>,
}

fn check_finite(x: &ArrayView2<f64>, what: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

/// Mean negative log-likelihood of `labels`; gradient is `(softmax − onehot)/B`.
pub fn cross_entropy(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<CrossEntropy> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::DimensionMismatch {
            axis: "labels".into(),
            expected: b,
            actual: labels.len(),
        });
    }
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0,{k})")));
    }
    check_finite(logits, "logits")?;
    let mut grad = Array2::zeros((b, k));
    let mut total = 0.0;
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
        for (j, v) in row.iter().enumerate() {
            grad[[i, j]] = (v - lse).exp() / b as f64;
        }
        grad[[i, y]] -= 1.0 / b as f64;
    }
    Ok(CrossEntropy {
        loss: LossValue::single("ce", total / b as f64),
        grad,
    })
}

#[derive(Clone, Debug)]
pub struct SupCon {
    pub loss: LossValue,
    pub grad: Array2<f64>,
    /// Anchors that had at least one positive.
    pub n_anchors: usize,
}

/// Supervised contrastive loss over unit-norm rows.
///
/// Every other row of the same label is a positive; the denominator runs
/// over every row except the anchor. Anchors without positives are left
/// out of the outer mean.
pub fn supcon_loss(projections: &ArrayView2<f64>, labels: &[usize], tau: f64) -> Result<SupCon> {
    let n = projections.nrows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            axis: "labels".into(),
            expected: n,
            actual: labels.len(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("tau must be > 0".into()));
    }
    check_finite(projections, "projections")?;
    for row in projections.rows() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!("projection rows must be unit-norm (got {norm})")));
        }
    }
    let sim = projections.dot(&projections.t()) / tau;
    // m[i][k]: derivative of the loss with respect to sim[i][k].
    let mut m = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    let mut n_anchors = 0;
    for i in 0..n {
        let n_pos = (0..n).filter(|&k| k != i && labels[k] == labels[i]).count();
        if n_pos == 0 {
            continue;
        }
        n_anchors += 1;
        let mx = (0..n)
            .filter(|&k| k != i)
            .map(|k| sim[[i, k]])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&k| k != i).map(|k| (sim[[i, k]] - mx).exp()).sum();
        let lse = mx + z.ln();
        let mut term = 0.0;
        for k in (0..n).filter(|&k| k != i) {
            m[[i, k]] = (sim[[i, k]] - lse).exp();
            if labels[k] == labels[i] {
                term += lse - sim[[i, k]];
                m[[i, k]] -= 1.0 / n_pos as f64;
            }
        }
        total += term / n_pos as f64;
    }
    if n_anchors == 0 {
        return Err(Error::NoPositivePairs);
    }
    let scale = 1.0 / (n_anchors as f64 * tau);
    m *= scale;
    let sym = &m + &m.t();
    let grad = sym.dot(projections);
    Ok(SupCon {
        loss: LossValue::single("cl", total / n_anchors as f64),
        grad,
        n_anchors,
    })
}

/// Cross-correlation between standardized paired features.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub c: Array2<f64>,
    pub n_pairs: usize,
}

#[derive(Clone, Debug)]
pub struct IbLoss {
    pub loss: LossValue,
    pub corr: CorrelationMatrix,
    pub grad_source: Array2<f64>,
    pub grad_target: Array2<f64>,
    /// Feature dimensions whose standard deviation hit the floor.
    pub n_floored: usize,
}

struct Standardized {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    n_floored: usize,
}

fn standardize(x: &ArrayView2<f64>) -> Standardized {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let mut xhat = x - &mean;
    let var = xhat.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let mut n_floored = 0;
    let inv_std = var.mapv(|v| {
        let s = v.sqrt();
        if s < STD_FLOOR {
            n_floored += 1;
        }
        1.0 / s.max(STD_FLOOR)
    });
    xhat *= &inv_std;
    Standardized { xhat, inv_std, n_floored }
}

/// Backward through per-column standardization.
fn standardize_backward(g: &Array2<f64>, st: &Standardized) -> Array2<f64> {
    let mean_g = g.mean_axis(Axis(0)).expect("nonempty");
    let mean_gx = (g * &st.xhat).mean_axis(Axis(0)).expect("nonempty");
    let mut out = g - &mean_g;
    out -= &(&st.xhat * &mean_gx);
    out *= &st.inv_std;
    out
}

/// `Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²` with `C = Ŝᵀ T̂ / N`.
pub fn ib_loss(source: &ArrayView2<f64>, target: &ArrayView2<f64>, lambda_offdiag: f64) -> Result<IbLoss> {
    let (n, d) = source.dim();
    if target.dim() != (n, d) {
        return Err(Error::DimensionMismatch {
            axis: if target.nrows() != n { "pairs".into() } else { "features".into() },
            expected: if target.nrows() != n { n } else { d },
            actual: if target.nrows() != n { target.nrows() } else { target.ncols() },
        });
    }
    if n < 2 {
        return Err(Error::InsufficientPairs { pairs: n });
    }
    check_finite(source, "source features")?;
    check_finite(target, "target features")?;
    let s = standardize(source);
    let t = standardize(target);
    let c = s.xhat.t().dot(&t.xhat) / n as f64;
    let mut on = 0.0;
    let mut off = 0.0;
    let mut gc = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            if i == j {
                on += (1.0 - c[[i, i]]).powi(2);
                gc[[i, i]] = -2.0 * (1.0 - c[[i, i]]);
            } else {
                off += c[[i, j]] * c[[i, j]];
                gc[[i, j]] = 2.0 * lambda_offdiag * c[[i, j]];
            }
        }
    }
    let value = on + lambda_offdiag * off;
    let ds = t.xhat.dot(&gc.t()) / n as f64;
    let dt = s.xhat.dot(&gc) / n as f64;
    let grad_source = standardize_backward(&ds, &s);
    let grad_target = standardize_backward(&dt, &t);
    let mut components = BTreeMap::new();
    components.insert("ib".to_string(), value);
    components.insert("ib_on_diag".to_string(), on);
    components.insert("ib_off_diag".to_string(), off);
    Ok(IbLoss {
        loss: LossValue { value, components },
        corr: CorrelationMatrix { c, n_pairs: n },
        grad_source,
        grad_target,
        n_floored: s.n_floored + t.n_floored,
    })
}

fn combine(first: &LossValue, first_name: &str, second: &LossValue, second_name: &str, weight: f64, weight_name: &str) -> LossValue {
    let weighted = weight * second.value;
    let value = first.value + weighted;
    let mut components = BTreeMap::new();
    components.insert(first_name.to_string(), first.value);
    components.insert(second_name.to_string(), second.value);
    components.insert(weight_name.to_string(), weighted);
    components.insert("total".to_string(), value);
    LossValue { value, components }
}

/// `ce + λ1·cl`.
pub fn phase1_total(ce: &LossValue, cl: &LossValue, lambda1: f64) -> LossValue {
    combine(ce, "ce", cl, "cl", lambda1, "weighted_cl")
}

/// `ce + α·ib`.
pub fn phase2_total(ce: &LossValue, ib: &LossValue, alpha: f64) -> LossValue {
    combine(ce, "ce", ib, "ib", alpha, "weighted_ib")
}
