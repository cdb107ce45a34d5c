use nalgebra::{DMatrix, SymmetricEigen};

use super::{Embedding2D, ProjectorTag};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Top-two principal axes of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// Unit loadings; the largest-magnitude entry of each is positive.
    pub axes: [Vec<f64>; 2],
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaFit {
    pub fn explained_variance_ratio(&self) -> [f64; 2] {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        [self.eigenvalues[0].max(0.0) / total, self.eigenvalues.get(1).map_or(0.0, |v| v.max(0.0)) / total]
    }

    pub fn project(&self, p: &[f64]) -> [f64; 2] {
        let dot = |axis: &[f64]| p.iter().zip(&self.mean).zip(axis).map(|((x, m), a)| (x - m) * a).sum();
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}

pub fn pca_fit(points: &[Vec<f64>]) -> Result<PcaFit> {
    if points.len() < 3 {
        return Err(Error::Size(format!("PCA needs at least 3 points, got {}", points.len())));
    }
    let dim = points[0].len();
    if dim < 2 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Data("PCA points must share a dimension >= 2".into()));
    }
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for p in points {
        for a in 0..dim {
            for b in 0..dim {
                cov[(a, b)] += (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    cov /= n;
    let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Data("PCA input has zero variance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |idx: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, x)| if x.abs() > bv.abs() + 1e-12 { (i, *x) } else { (bi, bv) })
            .0;
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    Ok(PcaFit {
        mean,
        axes: [axis(order[0]), axis(order[1])],
        eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
    })
}

/// Deterministic, seed-free projection onto the top two principal axes.
pub fn pca_embed(matrix: &FeatureMatrix) -> Result<(Embedding2D, PcaFit)> {
    let fit = pca_fit(&matrix.columns)?;
    let coords = matrix.columns.iter().map(|c| fit.project(c)).collect();
    Ok((
        Embedding2D { coords, layout: matrix.layout.clone(), projector: ProjectorTag::Pca, seed: None },
        fit,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_has_no_second_component() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let fit = pca_fit(&pts).unwrap();
        assert!(fit.eigenvalues[1].abs() < 1e-9);
        let r = fit.explained_variance_ratio();
        assert!((r[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_keeps_spectrum() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64;
                vec![t.sin() * 3.0, (t * 0.7).cos(), t * 0.1]
            })
            .collect();
        let (c, s) = (0.6f64, 0.8f64);
        let rotated: Vec<Vec<f64>> = pts.iter().map(|p| vec![c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]).collect();
        let a = pca_fit(&pts).unwrap().explained_variance_ratio();
        let b = pca_fit(&rotated).unwrap().explained_variance_ratio();
        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    }

    #[test]
    fn distances_along_first_axis_preserved() {
        let pts = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 0.0], vec![3.0, 4.0]];
        let fit = pca_fit(&pts).unwrap();
        let a = fit.project(&pts[0]);
        let b = fit.project(&pts[1]);
        assert!(((a[0] - b[0]).hypot(a[1] - b[1]) - 5.0).abs() < 1e-9);
        assert!(fit.axes[0].iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn rank_zero_is_error() {
        assert!(matches!(pca_fit(&vec![vec![1.0, 2.0]; 5]), Err(Error::Data(_))));
        assert!(matches!(pca_fit(&vec![vec![1.0, 2.0]; 2]), Err(Error::Size(_))));
    }
}
