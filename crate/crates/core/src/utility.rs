//! Alignment-quality utilities over a transport plan and their exact gradients.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::Coupling;
use crate::sparse::SparseMatrix;

/// Entries below this floor are clamped before taking logs.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    /// `sum T^2`, gradient `2T`.
    SquaredL2,
    /// `sum T log T`, gradient `log T + 1`.
    Entropy,
    /// `tr(T^T M1 T) + tr(T M2 T^T)`, gradient `2 M1 T + 2 T M2`.
    Consistency,
}

impl UtilityKind {
    pub fn name(self) -> &'static str {
        match self {
            UtilityKind::SquaredL2 => "squared_l2",
            UtilityKind::Entropy => "entropy",
            UtilityKind::Consistency => "consistency",
        }
    }
}

#[derive(Debug, Clone)]
pub struct UtilitySpec {
    kind: UtilityKind,
    laplacians: Option<Arc<(SparseMatrix, SparseMatrix)>>,
    shannon: bool,
}

impl UtilitySpec {
    pub fn squared_l2() -> Self {
        Self {
            kind: UtilityKind::SquaredL2,
            laplacians: None,
            shannon: false,
        }
    }

    /// `f = sum T log T`, paired with the gradient `log T + 1`.
    pub fn entropy() -> Self {
        Self {
            kind: UtilityKind::Entropy,
            laplacians: None,
            shannon: false,
        }
    }

    /// Shannon entropy `f = -sum T log T`; value and gradient are both negated.
    pub fn shannon_entropy() -> Self {
        Self {
            shannon: true,
            ..Self::entropy()
        }
    }

    /// Consistency utility over the source and target graph Laplacians.
    pub fn consistency(m1: SparseMatrix, m2: SparseMatrix) -> Result<Self> {
        for (what, l) in [("source Laplacian", &m1), ("target Laplacian", &m2)] {
            if l.nrows() != l.ncols() {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: "square".into(),
                    got: format!("{}x{}", l.nrows(), l.ncols()),
                });
            }
        }
        Ok(Self {
            kind: UtilityKind::Consistency,
            laplacians: Some(Arc::new((m1, m2))),
            shannon: false,
        })
    }

    /// Generic constructor that enforces the Laplacian pairing rule.
    pub fn from_parts(kind: UtilityKind, laplacians: Option<(SparseMatrix, SparseMatrix)>) -> Result<Self> {
        match (kind, laplacians) {
            (UtilityKind::Consistency, Some((m1, m2))) => Self::consistency(m1, m2),
            (UtilityKind::Consistency, None) => Err(Error::MissingLaplacians),
            (k, Some(_)) => Err(Error::UnexpectedLaplacians(k.name())),
            (UtilityKind::SquaredL2, None) => Ok(Self::squared_l2()),
            (UtilityKind::Entropy, None) => Ok(Self::entropy()),
        }
    }

    pub fn kind(&self) -> UtilityKind {
        self.kind
    }

    pub fn is_shannon(&self) -> bool {
        self.shannon
    }

    fn laplacians_for(&self, n: usize, m: usize) -> Result<&(SparseMatrix, SparseMatrix)> {
        let pair = self.laplacians.as_deref().ok_or(Error::MissingLaplacians)?;
        if pair.0.nrows() != n || pair.1.nrows() != m {
            return Err(Error::DimensionMismatch {
                what: "Laplacians vs plan",
                expected: format!("{n} and {m}"),
                got: format!("{} and {}", pair.0.nrows(), pair.1.nrows()),
            });
        }
        Ok(pair)
    }

    fn sign(&self) -> f64 {
        if self.shannon {
            -1.0
        } else {
            1.0
        }
    }
}

/// Utility value `f(T)`.
pub fn value(spec: &UtilitySpec, t: ArrayView2<'_, f64>) -> Result<f64> {
    let (n, m) = t.dim();
    Ok(match spec.kind {
        UtilityKind::SquaredL2 => t.iter().map(|v| v * v).sum(),
        UtilityKind::Entropy => spec.sign() * t.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>(),
        UtilityKind::Consistency => {
            let (m1, m2) = spec.laplacians_for(n, m)?;
            let rows: f64 = m1.triplets().map(|(i, k, w)| w * t.row(i).dot(&t.row(k))).sum();
            let tt = t.t().as_standard_layout().to_owned();
            let cols: f64 = m2.triplets().map(|(l, j, w)| w * tt.row(l).dot(&tt.row(j))).sum();
            rows + cols
        }
    })
}

/// Dense gradient `d f / d T`.
pub fn gradient(spec: &UtilitySpec, t: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (n, m) = t.dim();
    Ok(match spec.kind {
        UtilityKind::SquaredL2 => t.mapv(|v| 2.0 * v),
        UtilityKind::Entropy => {
            let s = spec.sign();
            t.mapv(|v| s * (v.max(LOG_FLOOR).ln() + 1.0))
        }
        UtilityKind::Consistency => {
            let (m1, m2) = spec.laplacians_for(n, m)?;
            let mut g = Array2::zeros((n, m));
            for (i, k, w) in m1.triplets() {
                g.row_mut(i).scaled_add(2.0 * w, &t.row(k));
            }
            for (i, mut grow) in g.outer_iter_mut().enumerate() {
                let trow = t.row(i);
                for (l, j, w) in m2.triplets() {
                    grow[j] += 2.0 * w * trow[l];
                }
            }
            g
        }
    })
}

/// Gradient entries at the coupling's support, in `support().entries()` order.
pub fn gradient_on_support(spec: &UtilitySpec, coupling: &Coupling) -> Result<Vec<f64>> {
    let t = coupling.values();
    let (n, m) = t.dim();
    let support = coupling.support();
    let mut out = Vec::with_capacity(support.len());
    match spec.kind {
        UtilityKind::SquaredL2 => out.extend(support.entries().map(|(i, j)| 2.0 * t[[i, j]])),
        UtilityKind::Entropy => {
            let s = spec.sign();
            out.extend(support.entries().map(|(i, j)| s * (t[[i, j]].max(LOG_FLOOR).ln() + 1.0)));
        }
        UtilityKind::Consistency => {
            // M2 is symmetric, so column j of M2 is read as row j.
            let (m1, m2) = spec.laplacians_for(n, m)?;
            out.extend(support.entries().map(|(i, j)| {
                let left: f64 = m1.row(i).map(|(k, w)| w * t[[k, j]]).sum();
                let right: f64 = m2.row(j).map(|(l, w)| w * t[[i, l]]).sum();
                2.0 * (left + right)
            }));
        }
    }
    Ok(out)
}
