//! Statistics backing the landscape observations: convergence coefficient,
//! path speed, histogram intersection and two significance tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::features::FeatureTrajectory;
use crate::landscape::{DensityGrid, Embedding2D, LandscapeBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub alpha: f64,
    pub beta: f64,
    pub e_beta: f64,
    pub residual_sse: f64,
}

/// Least squares of `ln d_i` on `i = 1..n`.
pub fn convergence_coefficient(distances: &[f64]) -> Result<RegressionFit> {
    if distances.len() < 3 {
        return Err(Error::Size(format!("need at least 3 distances, got {}", distances.len())));
    }
    if let Some(d) = distances.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::Domain(format!("distances must be positive and finite, got {d}")));
    }
    let n = distances.len() as f64;
    let logs: Vec<f64> = distances.iter().map(|d| d.ln()).collect();
    let mean_x = (n + 1.0) / 2.0;
    let mean_y = logs.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in logs.iter().enumerate() {
        let dx = (i + 1) as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    let beta = sxy / sxx;
    let alpha = mean_y - beta * mean_x;
    let residual_sse = logs
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let r = y - alpha - beta * (i + 1) as f64;
            r * r
        })
        .sum();
    Ok(RegressionFit { alpha, beta, e_beta: beta.exp(), residual_sse })
}

/// Which distance sequence feeds the convergence coefficient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    /// Normalized distance to the correct choice, every state.
    #[default]
    CorrectComponent,
    /// Euclidean feature distance to the trajectory's own final state, states 1..n-1.
    FinalState,
    /// Same as `FinalState` but measured in the 2D embedding.
    Embedded,
}

impl DistanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMode::CorrectComponent => "correct-component",
            DistanceMode::FinalState => "final-state",
            DistanceMode::Embedded => "embedded",
        }
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance sequence of one trajectory. `path` is required for `Embedded`.
pub fn distance_sequence(ft: &FeatureTrajectory, mode: DistanceMode, path: Option<&[[f64; 2]]>) -> Result<Vec<f64>> {
    let n = ft.n();
    match mode {
        DistanceMode::CorrectComponent => Ok(ft.features.iter().map(|f| f.normalized[0]).collect()),
        DistanceMode::FinalState => {
            let last = &ft.features[n - 1].normalized;
            Ok(ft.features[..n - 1].iter().map(|f| l2(&f.normalized, last)).collect())
        }
        DistanceMode::Embedded => {
            let path = path.ok_or_else(|| Error::Argument("embedded distances need a 2D path".into()))?;
            if path.len() != n {
                return Err(Error::Data(format!("path has {} points for {n} states", path.len())));
            }
            let last = path[n - 1];
            Ok(path[..n - 1].iter().map(|p| l2(p, &last)).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedResult {
    pub speed: f64,
    pub displacement: f64,
    pub path_length: f64,
    /// Every point identical; speed is reported as 0.
    pub degenerate: bool,
}

pub fn path_speed(coords: &[[f64; 2]]) -> Result<SpeedResult> {
    if coords.len() < 2 {
        return Err(Error::Size(format!("path needs at least 2 points, got {}", coords.len())));
    }
    let path_length: f64 = coords.windows(2).map(|w| l2(&w[0], &w[1])).sum();
    let displacement = l2(&coords[0], &coords[coords.len() - 1]);
    if path_length == 0.0 {
        return Ok(SpeedResult { speed: 0.0, displacement, path_length, degenerate: true });
    }
    Ok(SpeedResult { speed: (displacement / path_length).min(1.0), displacement, path_length, degenerate: false })
}

/// Σ min of cell masses over two grids on the same lattice.
pub fn histogram_intersection(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    if a.g != b.g || a.bounds != b.bounds || a.values.len() != b.values.len() {
        return Err(Error::Argument(format!(
            "grids differ in shape or bounds ({} vs {} cells per side)",
            a.g, b.g
        )));
    }
    let (ma, mb) = (a.cell_masses(), b.cell_masses());
    Ok(ma.iter().zip(&mb).map(|(x, y)| x.min(*y)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_variance(v: &[f64], m: f64) -> f64 {
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn two_sided_t(t: f64, df: f64) -> Result<f64> {
    if t.is_infinite() {
        return Ok(0.0);
    }
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// Pearson r with a two-sided Student-t p-value on n-2 degrees of freedom.
pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::Argument(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Size(format!("correlation needs at least 3 pairs, got {}", x.len())));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation undefined for a constant series".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (x.len() - 2) as f64;
    let t = if r.abs() == 1.0 { f64::INFINITY } else { r * (df / (1.0 - r * r)).sqrt() };
    Ok(Correlation { r, p_value: two_sided_t(t, df)?, n: x.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub mean_a: f64,
    pub mean_b: f64,
}

/// Two-sided Welch unequal-variance t-test.
pub fn group_difference_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Size(format!("each group needs at least 2 values, got {} and {}", a.len(), b.len())));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a, ma) / a.len() as f64, sample_variance(b, mb) / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        // Both groups constant: identical means are indistinguishable,
        // different ones infinitely separated.
        let p = if ma == mb { 1.0 } else { 0.0 };
        let t = if ma == mb { 0.0 } else { f64::INFINITY.copysign(ma - mb) };
        return Ok(WelchTest { t, df: (a.len() + b.len() - 2) as f64, p_value: p, mean_a: ma, mean_b: mb });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    Ok(WelchTest { t, df, p_value: two_sided_t(t, df)?, mean_a: ma, mean_b: mb })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTags {
    pub method: String,
    pub model: String,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMean {
    pub mean: Option<f64>,
    pub count: usize,
}

impl ClassMean {
    fn of(v: &[f64]) -> Self {
        ClassMean { mean: (!v.is_empty()).then(|| mean(v)), count: v.len() }
    }
}

/// A significance test that may not apply to the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test: String,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub note: Option<String>,
}

impl TestOutcome {
    fn from_result(test: &str, r: Result<(f64, f64)>) -> Self {
        match r {
            Ok((s, p)) => TestOutcome { test: test.into(), statistic: Some(s), p_value: Some(p), note: None },
            Err(e) => TestOutcome {
                test: test.into(),
                statistic: None,
                p_value: None,
                note: Some(format!("not applicable: {e}")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub mode: DistanceMode,
    pub correct: ClassMean,
    pub incorrect: ClassMean,
    /// Trajectories whose sequence was too short or hit a zero distance.
    pub excluded: usize,
    pub difference: TestOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinIntersection {
    pub bin: usize,
    pub label: String,
    pub correct_vs_incorrect: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationReport {
    pub tags: ReportTags,
    pub trajectories: usize,
    pub questions: usize,
    pub accuracy: f64,
    pub convergence: Vec<ConvergenceSummary>,
    pub speed_correct: ClassMean,
    pub speed_incorrect: ClassMean,
    pub speed_all: ClassMean,
    /// Per-question mean path speed against per-question accuracy.
    pub speed_accuracy: TestOutcome,
    pub intersections: Vec<BinIntersection>,
}

/// Aggregates every statistic for one run. `bundle` supplies the embedding
/// (for speeds and embedded distances) and statistics-resolution grids.
pub fn observation_report(
    tags: ReportTags,
    ftrajs: &[FeatureTrajectory],
    bundle: &LandscapeBundle,
) -> Result<ObservationReport> {
    if ftrajs.is_empty() {
        return Err(Error::Data("no featurized trajectories".into()));
    }
    let paths = bundle.embedding.trajectory_paths(ftrajs.len());
    check_paths(&bundle.embedding, ftrajs, &paths)?;

    let mut convergence = Vec::new();
    for mode in [DistanceMode::CorrectComponent, DistanceMode::FinalState, DistanceMode::Embedded] {
        let (mut c, mut i, mut excluded) = (Vec::new(), Vec::new(), 0);
        for (ft, path) in ftrajs.iter().zip(&paths) {
            let Some(ok) = ft.is_correct else { continue };
            match distance_sequence(ft, mode, Some(path)).and_then(|d| convergence_coefficient(&d)) {
                Ok(fit) if ok => c.push(fit.e_beta),
                Ok(fit) => i.push(fit.e_beta),
                Err(_) => excluded += 1,
            }
        }
        let difference = TestOutcome::from_result(
            "welch-t (incorrect vs correct e^beta)",
            group_difference_test(&i, &c).map(|w| (w.t, w.p_value)),
        );
        convergence.push(ConvergenceSummary {
            mode,
            correct: ClassMean::of(&c),
            incorrect: ClassMean::of(&i),
            excluded,
            difference,
        });
    }

    let (mut sc, mut si, mut sa) = (Vec::new(), Vec::new(), Vec::new());
    let mut per_question: BTreeMap<&str, (Vec<f64>, usize, usize)> = BTreeMap::new();
    for (ft, path) in ftrajs.iter().zip(&paths) {
        let entry = per_question.entry(ft.question_id.as_str()).or_default();
        entry.2 += 1;
        entry.1 += usize::from(ft.is_correct == Some(true));
        let Ok(s) = path_speed(path) else { continue };
        sa.push(s.speed);
        entry.0.push(s.speed);
        match ft.is_correct {
            Some(true) => sc.push(s.speed),
            Some(false) => si.push(s.speed),
            None => {}
        }
    }
    let (mut qx, mut qy) = (Vec::new(), Vec::new());
    for (speeds, correct, total) in per_question.values() {
        if !speeds.is_empty() {
            qx.push(mean(speeds));
            qy.push(*correct as f64 / *total as f64);
        }
    }
    let speed_accuracy =
        TestOutcome::from_result("pearson-t (question speed vs accuracy)", pearson_correlation(&qx, &qy).map(|c| (c.r, c.p_value)));

    let intersections = bundle
        .stats_panels
        .iter()
        .map(|p| {
            let v = match (&p.correct, &p.incorrect) {
                (Some(a), Some(b)) => Some(histogram_intersection(a, b)?),
                _ => None,
            };
            Ok(BinIntersection { bin: p.bin.index, label: p.bin.label(), correct_vs_incorrect: v })
        })
        .collect::<Result<Vec<_>>>()?;

    let correct = ftrajs.iter().filter(|f| f.is_correct == Some(true)).count();
    Ok(ObservationReport {
        tags,
        trajectories: ftrajs.len(),
        questions: per_question.len(),
        accuracy: correct as f64 / ftrajs.len() as f64,
        convergence,
        speed_correct: ClassMean::of(&sc),
        speed_incorrect: ClassMean::of(&si),
        speed_all: ClassMean::of(&sa),
        speed_accuracy,
        intersections,
    })
}

fn check_paths(emb: &Embedding2D, ftrajs: &[FeatureTrajectory], paths: &[Vec<[f64; 2]>]) -> Result<()> {
    for (t, (ft, p)) in ftrajs.iter().zip(paths).enumerate() {
        if p.len() != ft.n() {
            return Err(Error::Data(format!(
                "embedding ({:?}) has {} states for trajectory {t}, expected {}",
                emb.projector,
                p.len(),
                ft.n()
            )));
        }
    }
    Ok(())
}

/// Pairwise intersections between named grids, e.g. the same class across
/// runs that share bounds. Entry (i, j) is None when the lattices differ.
pub fn pairwise_intersections(grids: &[&DensityGrid]) -> Vec<Vec<Option<f64>>> {
    grids
        .iter()
        .map(|a| grids.iter().map(|b| histogram_intersection(a, b).ok()).collect())
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn fmt_p(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3e}"))
}

impl ObservationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method {} | model {} | dataset {}", self.tags.method, self.tags.model, self.tags.dataset);
        let _ = writeln!(
            s,
            "trajectories {} over {} questions, accuracy {:.4}\n",
            self.trajectories, self.questions, self.accuracy
        );
        let _ = writeln!(s, "convergence coefficient e^beta (lower = faster convergence)");
        let _ = writeln!(s, "{:<18} {:>10} {:>10} {:>8} {:>11}", "distance", "correct", "incorrect", "excluded", "p (welch)");
        for c in &self.convergence {
            let _ = writeln!(
                s,
                "{:<18} {:>10} {:>10} {:>8} {:>11}",
                c.mode.as_str(),
                fmt_opt(c.correct.mean),
                fmt_opt(c.incorrect.mean),
                c.excluded,
                fmt_p(c.difference.p_value)
            );
        }
        let _ = writeln!(s, "\npath speed (displacement / path length)");
        let _ = writeln!(
            s,
            "correct {} (n={})  incorrect {} (n={})  all {} (n={})",
            fmt_opt(self.speed_correct.mean),
            self.speed_correct.count,
            fmt_opt(self.speed_incorrect.mean),
            self.speed_incorrect.count,
            fmt_opt(self.speed_all.mean),
            self.speed_all.count
        );
        let _ = writeln!(
            s,
            "speed vs accuracy per question: r {}  p {}{}",
            fmt_opt(self.speed_accuracy.statistic),
            fmt_p(self.speed_accuracy.p_value),
            self.speed_accuracy.note.as_ref().map_or(String::new(), |n| format!("  ({n})"))
        );
        let _ = writeln!(s, "\nhistogram intersection, correct vs incorrect");
        for b in &self.intersections {
            let _ = writeln!(s, "{:<16} {}", b.label, fmt_opt(b.correct_vs_incorrect));
        }
        for c in &self.convergence {
            if let Some(n) = &c.difference.note {
                let _ = writeln!(s, "\n{}: {n}", c.mode.as_str());
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::{Bounds, CorrectnessClass};

    #[test]
    fn convergence_examples() {
        let d: Vec<f64> = (1..=12).map(|i| 2.0 * 0.9f64.powi(i)).collect();
        let fit = convergence_coefficient(&d).unwrap();
        assert!((fit.e_beta - 0.9).abs() < 1e-6);
        assert!((fit.alpha - 2f64.ln()).abs() < 1e-9);
        assert!((convergence_coefficient(&[0.3; 5]).unwrap().e_beta - 1.0).abs() < 1e-12);
        assert!(matches!(convergence_coefficient(&[1.0, 0.0, 2.0]), Err(Error::Domain(_))));
        assert!(matches!(convergence_coefficient(&[1.0, 2.0]), Err(Error::Size(_))));
    }

    #[test]
    fn speed_examples() {
        assert_eq!(path_speed(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).unwrap().speed, 1.0);
        assert_eq!(path_speed(&[[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]).unwrap().speed, 0.0);
        let s = path_speed(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]).unwrap().speed;
        assert!((s - 2f64.sqrt() / 2.0).abs() < 1e-12);
        let d = path_speed(&[[1.0, 1.0]; 3]).unwrap();
        assert!(d.degenerate && d.speed == 0.0);
        assert!(path_speed(&[[0.0, 0.0]]).is_err());
    }

    fn grid(values: Vec<f64>, g: usize) -> DensityGrid {
        DensityGrid {
            g,
            bounds: Bounds { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 },
            bandwidth: 0.1,
            class: CorrectnessClass::Correct,
            bin: None,
            values,
        }
    }

    #[test]
    fn intersection_examples() {
        let a = grid(vec![2.0, 2.0, 0.0, 0.0], 2);
        let b = grid(vec![0.0, 0.0, 2.0, 2.0], 2);
        assert_eq!(histogram_intersection(&a, &a).unwrap(), 1.0);
        assert_eq!(histogram_intersection(&a, &b).unwrap(), 0.0);
        let c = grid(vec![1.0; 9], 3);
        assert!(histogram_intersection(&a, &c).is_err());
        let m = pairwise_intersections(&[&a, &b, &c]);
        assert_eq!(m[0][1], Some(0.0));
        assert_eq!(m[0][2], None);
    }

    #[test]
    fn pearson_examples() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let c = pearson_correlation(&x, &y).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12 && c.p_value < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_correlation(&x, &neg).unwrap().r + 1.0).abs() < 1e-12);
        assert!(matches!(pearson_correlation(&x, &[1.0; 10]), Err(Error::Degenerate(_))));
        // By hand: sxy = 14.5, sxx = syy = 17.5.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0];
        let c = pearson_correlation(&x, &y).unwrap();
        assert!((c.r - 0.8285714285714286).abs() < 1e-12);
    }

    #[test]
    fn welch_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let w = group_difference_test(&a, &a).unwrap();
        assert_eq!(w.p_value, 1.0);
        assert!(matches!(group_difference_test(&[1.0], &a), Err(Error::Size(_))));
        // Hand-evaluated: means 2.5 vs 6, variances 5/3 and 2/3 over n=4.
        let b = [5.0, 6.0, 7.0, 6.0];
        let w = group_difference_test(&a, &b).unwrap();
        let se2: f64 = 5.0 / 12.0 + 2.0 / 12.0;
        assert!((w.t - (-3.5 / se2.sqrt())).abs() < 1e-12);
        let df = se2 * se2 / ((5.0f64 / 12.0).powi(2) / 3.0 + (2.0f64 / 12.0).powi(2) / 3.0);
        assert!((w.df - df).abs() < 1e-12);
    }
}
