//! Two-dimensional kernel PCA.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Kernel {
    Linear,
    /// `exp(−γ‖x − y‖²)`; `None` means `γ = 1/d`.
    Rbf {
        gamma: Option<f64>,
    },
}

impl Kernel {
    fn eval(&self, a: &[f64], b: &[f64], gamma: f64) -> f64 {
        match self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { .. } => (-gamma * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub eigenvalues: [f64; 2],
    /// Kernel rank below two: the missing axes are zero.
    pub degenerate: bool,
}

/// Projects points onto the top two components of the double-centred
/// kernel matrix, scaled by √λ. Each axis is signed so that its
/// largest-magnitude coordinate is positive.
pub fn kpca_project<V: AsRef<[f64]>>(points: &[V], kernel: Kernel) -> Result<Projection> {
    let n = points.len();
    if n < 3 {
        return Err(Error::EmptyInput("kernel PCA needs at least three points"));
    }
    let d = points[0].as_ref().len();
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: p.as_ref().len() });
    }
    let gamma = match kernel {
        Kernel::Rbf { gamma: Some(g) } => g,
        _ => 1.0 / d as f64,
    };
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(points[i].as_ref(), points[j].as_ref(), gamma);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] += grand - row_means[i] - row_means[j];
        }
    }
    let eig = SymmetricEigen::new(k);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let floor = 1e-12 * top.max(1e-300);
    let mut coords = vec![[0.0; 2]; n];
    let mut eigenvalues = [0.0; 2];
    let mut degenerate = false;
    for axis in 0..2 {
        let lambda = eig.eigenvalues[order[axis]];
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(lambda > floor) {
            degenerate = true;
            continue;
        }
        eigenvalues[axis] = lambda;
        let col = eig.eigenvectors.column(order[axis]);
        let scale = lambda.sqrt();
        let mut vals: Vec<f64> = col.iter().map(|v| v * scale).collect();
        let pivot = vals.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            vals.iter_mut().for_each(|v| *v = -*v);
        }
        for (c, v) in coords.iter_mut().zip(vals) {
            c[axis] = v;
        }
    }
    Ok(Projection { coords, eigenvalues, degenerate })
}
