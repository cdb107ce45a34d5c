//! Exact t-SNE: dense Gaussian input affinities calibrated per point by
//! binary search on the precision, Student-t output kernel, gradient descent
//! with gains, momentum switching and early exaggeration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Embedding2D, ProjectorTag};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::parallel::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    /// Requested perplexity; capped at `(N - 1) / 3` per run.
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    /// Standard deviation of the seeded Gaussian initialization.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            init_scale: 1e-4,
            seed: 0,
        }
    }
}

impl TsneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity >= 2.0) {
            return Err(Error::Config("t-SNE perplexity must be >= 2".into()));
        }
        if self.iterations < 250 {
            return Err(Error::Config("t-SNE needs at least 250 iterations".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("t-SNE learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_perplexity(&self, n_points: usize) -> f64 {
        self.perplexity.min((n_points as f64 - 1.0) / 3.0)
    }
}

/// Diagnostics of one t-SNE run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneReport {
    pub effective_perplexity: f64,
    /// Entropy (nats) of each point's conditional affinity row.
    pub row_entropies: Vec<f64>,
    pub initial_kl: f64,
    pub final_kl: f64,
}

const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 200;
const P_FLOOR: f64 = 1e-12;

fn squared_distances(exec: Execution, x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let rows = parallel::map_range(exec, n, |i| {
        (0..n)
            .map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    rows.concat()
}

/// Conditional affinities `p(j|i)` for one row and their entropy.
fn calibrate_row(dist: &[f64], i: usize, target_entropy: f64) -> (Vec<f64>, f64) {
    let n = dist.len();
    let d_min = dist
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    let eval = |beta: f64| -> (Vec<f64>, f64) {
        let mut p = vec![0.0; n];
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let shifted = dist[j] - d_min;
            let v = (-beta * shifted).exp();
            p[j] = v;
            sum += v;
            weighted += shifted * v;
        }
        let entropy = sum.ln() + beta * weighted / sum;
        for v in &mut p {
            *v /= sum;
        }
        (p, entropy)
    };

    let mut beta = 1.0;
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let (mut p, mut h) = eval(beta);
    for _ in 0..MAX_BISECTIONS {
        let diff = h - target_entropy;
        if diff.abs() < ENTROPY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
        if !beta.is_finite() || beta > 1e300 {
            break;
        }
        (p, h) = eval(beta);
    }
    (p, h)
}

/// Symmetrized joint affinities (dense, row-major) plus per-row entropies.
pub fn joint_affinities(exec: Execution, x: &[Vec<f64>], perplexity: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let dist = squared_distances(exec, x);
    let target = perplexity.ln();
    let rows = parallel::map_range(exec, n, |i| calibrate_row(&dist[i * n..(i + 1) * n], i, target));
    let entropies = rows.iter().map(|(_, h)| *h).collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((rows[i].0[j] + rows[j].0[i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }
    (p, entropies)
}

/// Student-t kernel rows: `1 / (1 + |y_i - y_j|^2)`, zero on the diagonal.
fn kernel_row(y: &[[f64; 2]], i: usize) -> Vec<f64> {
    y.iter()
        .enumerate()
        .map(|(j, yj)| {
            if i == j {
                0.0
            } else {
                let dx = y[i][0] - yj[0];
                let dy = y[i][1] - yj[1];
                1.0 / (1.0 + dx * dx + dy * dy)
            }
        })
        .collect()
}

/// KL(P || Q) for the current layout.
pub fn kl_divergence(exec: Execution, p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let rows = parallel::map_range(exec, n, |i| kernel_row(y, i));
    let z: f64 = rows.iter().map(|r| r.iter().sum::<f64>()).sum();
    let per_row = parallel::map_range(exec, n, |i| {
        let mut acc = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[i * n + j];
            let qij = (rows[i][j] / z).max(P_FLOOR);
            acc += pij * (pij / qij).ln();
        }
        acc
    });
    per_row.iter().sum()
}

fn gradient(exec: Execution, p: &[f64], y: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
    let n = y.len();
    let rows = parallel::map_range(exec, n, |i| kernel_row(y, i));
    let z: f64 = rows.iter().map(|r| r.iter().sum::<f64>()).sum();
    parallel::map_range(exec, n, |i| {
        let mut g = [0.0; 2];
        for j in 0..n {
            if i == j {
                continue;
            }
            let num = rows[i][j];
            let mult = (exaggeration * p[i * n + j] - num / z) * num;
            g[0] += mult * (y[i][0] - y[j][0]);
            g[1] += mult * (y[i][1] - y[j][1]);
        }
        [4.0 * g[0], 4.0 * g[1]]
    })
}

fn validate_points(points: &[Vec<f64>]) -> Result<()> {
    if points.len() < 10 {
        return Err(Error::Size(format!("t-SNE needs at least 10 points, got {}", points.len())));
    }
    let dim = points[0].len();
    if dim < 2 {
        return Err(Error::Data("t-SNE input must have at least 2 dimensions".into()));
    }
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::Data(format!("point {i} has dimension {} not {dim}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("point {i} has a non-finite coordinate")));
        }
    }
    Ok(())
}

/// Embeds arbitrary points; the building block of [`tsne_embed`].
pub fn tsne_points(
    exec: Execution,
    points: &[Vec<f64>],
    params: &TsneParams,
) -> Result<(Vec<[f64; 2]>, TsneReport)> {
    params.validate()?;
    validate_points(points)?;
    let n = points.len();
    let perplexity = params.effective_perplexity(n);
    let (p, row_entropies) = joint_affinities(exec, points, perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, params.init_scale).map_err(|e| Error::Config(e.to_string()))?;
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let initial_kl = kl_divergence(exec, &p, &y);

    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for iter in 0..params.iterations {
        let exaggeration = if iter < params.exaggeration_iterations { params.early_exaggeration } else { 1.0 };
        let momentum = if iter < params.momentum_switch { params.initial_momentum } else { params.final_momentum };
        let grad = gradient(exec, &p, &y, exaggeration);
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (update[i][d] > 0.0);
                gains[i][d] = if same_sign { gains[i][d] * 0.8 } else { gains[i][d] + 0.2 };
                gains[i][d] = gains[i][d].max(0.01);
                update[i][d] = momentum * update[i][d] - params.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        let mean = y.iter().fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        for v in &mut y {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("t-SNE diverged to non-finite coordinates".into()));
    }
    let final_kl = kl_divergence(exec, &p, &y);
    Ok((y, TsneReport { effective_perplexity: perplexity, row_entropies, initial_kl, final_kl }))
}

/// Projects every column (states then anchors) of `matrix` to 2D.
pub fn tsne_embed(matrix: &FeatureMatrix, params: &TsneParams) -> Result<(Embedding2D, TsneReport)> {
    tsne_embed_with(Execution::default(), matrix, params)
}

pub fn tsne_embed_with(
    exec: Execution,
    matrix: &FeatureMatrix,
    params: &TsneParams,
) -> Result<(Embedding2D, TsneReport)> {
    if matrix.k < 2 {
        return Err(Error::Data("feature dimension must be >= 2".into()));
    }
    let (coords, report) = tsne_points(exec, &matrix.columns, params)?;
    Ok((
        Embedding2D {
            coords,
            layout: matrix.layout.clone(),
            projector: ProjectorTag::Tsne,
            seed: Some(params.seed),
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64, per: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for _ in 0..per {
                pts.push((0..5).map(|d| if d == c { 5.0 } else { 0.0 } + noise.sample(&mut rng)).collect());
                labels.push(c);
            }
        }
        (pts, labels)
    }

    #[test]
    fn row_entropies_hit_target() {
        let (pts, _) = blobs(3, 20);
        let (_, h) = joint_affinities(Execution::Sequential, &pts, 10.0);
        for e in h {
            assert!((e - 10f64.ln()).abs() < 1e-4, "entropy {e}");
        }
    }

    #[test]
    fn kl_decreases_and_is_deterministic() {
        let (pts, _) = blobs(1, 10);
        let params = TsneParams { iterations: 600, seed: 9, ..TsneParams::default() };
        let (a, rep) = tsne_points(Execution::Sequential, &pts, &params).unwrap();
        assert!(rep.final_kl < rep.initial_kl, "{} {}", rep.initial_kl, rep.final_kl);
        let (b, _) = tsne_points(Execution::Parallel, &pts, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_points_stay_finite() {
        let pts = vec![vec![0.2, 0.3, 0.5]; 12];
        let params = TsneParams { iterations: 250, ..TsneParams::default() };
        let (y, _) = tsne_points(Execution::Sequential, &pts, &params).unwrap();
        assert!(y.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn input_validation() {
        let few = vec![vec![0.0, 1.0]; 9];
        assert!(matches!(tsne_points(Execution::Sequential, &few, &TsneParams::default()), Err(Error::Size(_))));
        let mut bad = vec![vec![0.0, 1.0]; 12];
        bad[3][1] = f64::NAN;
        assert!(matches!(tsne_points(Execution::Sequential, &bad, &TsneParams::default()), Err(Error::Data(_))));
        let p = TsneParams { iterations: 100, ..TsneParams::default() };
        assert!(p.validate().is_err());
    }
}
