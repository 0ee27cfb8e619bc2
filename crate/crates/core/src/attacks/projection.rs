//! Exact projections onto l-inf / l2 / l1 balls.

use ndarray::{Array2, ArrayViewMut1};

use crate::error::{MatError, Result};

/// Perturbation norm families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Linf,
    L2,
    L1,
}

impl NormKind {
    pub fn label(&self) -> &'static str {
        match self {
            NormKind::Linf => "linf",
            NormKind::L2 => "l2",
            NormKind::L1 => "l1",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "linf" | "inf" => Ok(NormKind::Linf),
            "l2" | "2" => Ok(NormKind::L2),
            "l1" | "1" => Ok(NormKind::L1),
            other => Err(MatError::Config(format!("unsupported norm '{other}'"))),
        }
    }

    pub fn norm_of(&self, v: &[f64]) -> f64 {
        match self {
            NormKind::Linf => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
            NormKind::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            NormKind::L1 => v.iter().map(|x| x.abs()).sum(),
        }
    }
}

/// Project every row of `delta` onto the `norm` ball of radius `eps`.
///
/// Rows already inside the ball are returned unchanged; the projection is the
/// Euclidean one for l2 and l1 and a coordinate clamp for l-inf, and it is
/// idempotent.
pub fn project_ball(delta: &Array2<f64>, norm: NormKind, eps: f64) -> Result<Array2<f64>> {
    if !(eps > 0.0) {
        return Err(MatError::Config(format!("projection radius must be positive, got {eps}")));
    }
    let mut out = delta.clone();
    for row in out.rows_mut() {
        project_row(row, norm, eps);
    }
    Ok(out)
}

/// In-place single-vector projection.
pub fn project_row(mut row: ArrayViewMut1<'_, f64>, norm: NormKind, eps: f64) {
    match norm {
        NormKind::Linf => {
            row.mapv_inplace(|v| v.clamp(-eps, eps));
        }
        NormKind::L2 => {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > eps {
                let scale = eps / n;
                row.mapv_inplace(|v| v * scale);
            }
        }
        NormKind::L1 => {
            let n: f64 = row.iter().map(|v| v.abs()).sum();
            if n > eps {
                let lambda = simplex_threshold(row.iter().map(|v| v.abs()), eps);
                row.mapv_inplace(|v| v.signum() * (v.abs() - lambda).max(0.0));
            }
        }
    }
}

/// Soft-threshold level for Euclidean projection onto the l1 ball, via the
/// sorted-cumulative-sum rule: with `u` the magnitudes sorted descending and
/// `rho = max { j : u_j > (sum_{i<=j} u_i - eps) / j }`, the threshold is
/// `(sum_{i<=rho} u_i - eps) / rho`.
fn simplex_threshold(magnitudes: impl Iterator<Item = f64>, eps: f64) -> f64 {
    let mut u: Vec<f64> = magnitudes.collect();
    u.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite magnitudes"));
    let mut cumsum = 0.0;
    let mut lambda = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let candidate = (cumsum - eps) / (j + 1) as f64;
        if uj > candidate {
            lambda = candidate;
        }
    }
    lambda.max(0.0)
}
