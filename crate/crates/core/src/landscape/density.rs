use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectnessClass {
    Correct,
    Incorrect,
}

impl CorrectnessClass {
    pub fn of(is_correct: bool) -> Self {
        if is_correct {
            CorrectnessClass::Correct
        } else {
            CorrectnessClass::Incorrect
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CorrectnessClass::Correct => "correct",
            CorrectnessClass::Incorrect => "incorrect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    /// Bounding box of `points` grown by `margin` of its extent on each side.
    pub fn enclosing(points: &[[f64; 2]], margin: f64) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::Argument("no points to bound".into()))?;
        let mut b = Bounds { x_min: first[0], x_max: first[0], y_min: first[1], y_max: first[1] };
        for p in points {
            b.x_min = b.x_min.min(p[0]);
            b.x_max = b.x_max.max(p[0]);
            b.y_min = b.y_min.min(p[1]);
            b.y_max = b.y_max.max(p[1]);
        }
        let pad = |lo: &mut f64, hi: &mut f64| {
            let extent = *hi - *lo;
            let m = if extent > 0.0 { extent * margin } else { 0.5 };
            *lo -= m;
            *hi += m;
        };
        pad(&mut b.x_min, &mut b.x_max);
        pad(&mut b.y_min, &mut b.y_max);
        Ok(b)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Bounds { x_min: self.x_min + dx, x_max: self.x_max + dx, y_min: self.y_min + dy, y_max: self.y_max + dy }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// Kernel density on a `g × g` grid, row-major with row 0 at `y_min`.
/// Values are densities: `Σ values · cell_area = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub g: usize,
    pub bounds: Bounds,
    pub bandwidth: f64,
    pub class: CorrectnessClass,
    #[serde(default)]
    pub bin: Option<usize>,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn cell_area(&self) -> f64 {
        (self.bounds.width() / self.g as f64) * (self.bounds.height() / self.g as f64)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.g + col]
    }

    /// Probability mass per cell.
    pub fn cell_masses(&self) -> Vec<f64> {
        let a = self.cell_area();
        self.values.iter().map(|v| v * a).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_area()
    }

    /// Grid cell holding the maximum density.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.g, best % self.g)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        let cw = self.bounds.width() / self.g as f64;
        let ch = self.bounds.height() / self.g as f64;
        [self.bounds.x_min + (col as f64 + 0.5) * cw, self.bounds.y_min + (row as f64 + 0.5) * ch]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "value")]
pub enum BandwidthRule {
    /// `σ · n^(-1/6)` with σ the root mean of the two axis variances and `n`
    /// the number of distinct points, floored at 1.5 grid cells.
    #[default]
    Scott,
    Fixed(f64),
}

fn scott_bandwidth(points: &[[f64; 2]]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let vx = points.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / n;
    let vy = points.iter().map(|p| (p[1] - my).powi(2)).sum::<f64>() / n;
    let mut distinct: Vec<(u64, u64)> = points.iter().map(|p| (p[0].to_bits(), p[1].to_bits())).collect();
    distinct.sort_unstable();
    distinct.dedup();
    ((vx + vy) / 2.0).sqrt() * (distinct.len() as f64).powf(-1.0 / 6.0)
}

/// Gaussian KDE of `points` over `bounds`. `None` when there are no points.
pub fn density_map(
    points: &[[f64; 2]],
    bounds: Bounds,
    g: usize,
    rule: BandwidthRule,
    class: CorrectnessClass,
    bin: Option<usize>,
) -> Result<Option<DensityGrid>> {
    if g < 1 {
        return Err(Error::Argument("grid size must be >= 1".into()));
    }
    if !(bounds.width() > 0.0 && bounds.height() > 0.0) {
        return Err(Error::Argument("grid bounds have zero extent".into()));
    }
    if points.is_empty() {
        return Ok(None);
    }
    let cw = bounds.width() / g as f64;
    let ch = bounds.height() / g as f64;
    let floor = 1.5 * cw.max(ch);
    let h = match rule {
        BandwidthRule::Scott => scott_bandwidth(points).max(floor),
        BandwidthRule::Fixed(h) if h > 0.0 => h,
        BandwidthRule::Fixed(h) => return Err(Error::Argument(format!("bandwidth {h} must be positive"))),
    };
    let inv = 1.0 / (2.0 * h * h);
    let centers_x: Vec<f64> = (0..g).map(|c| bounds.x_min + (c as f64 + 0.5) * cw).collect();
    let centers_y: Vec<f64> = (0..g).map(|r| bounds.y_min + (r as f64 + 0.5) * ch).collect();
    // Separable kernel: per point, one row of x weights and one of y weights.
    let mut values = vec![0.0; g * g];
    let mut wx = vec![0.0; g];
    let mut wy = vec![0.0; g];
    for p in points {
        for (w, c) in wx.iter_mut().zip(&centers_x) {
            *w = (-(c - p[0]).powi(2) * inv).exp();
        }
        for (w, c) in wy.iter_mut().zip(&centers_y) {
            *w = (-(c - p[1]).powi(2) * inv).exp();
        }
        for (r, row) in values.chunks_mut(g).enumerate() {
            let yr = wy[r];
            if yr == 0.0 {
                continue;
            }
            for (v, x) in row.iter_mut().zip(&wx) {
                *v += yr * x;
            }
        }
    }
    let total: f64 = values.iter().sum::<f64>() * cw * ch;
    if !(total > 0.0) {
        return Err(Error::Data("density underflowed on every grid cell".into()));
    }
    values.iter_mut().for_each(|v| *v /= total);
    Ok(Some(DensityGrid { g, bounds, bandwidth: h, class, bin, values }))
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    bounds: Bounds,
    g: usize,
    bandwidth: f64,
    class: CorrectnessClass,
    bin: Option<usize>,
}

/// Text matrix: a `#`-prefixed JSON header line, then `g` rows of
/// space-separated values in shortest round-trip form.
pub fn grid_to_text(grid: &DensityGrid) -> Result<String> {
    let header = GridHeader {
        bounds: grid.bounds,
        g: grid.g,
        bandwidth: grid.bandwidth,
        class: grid.class,
        bin: grid.bin,
    };
    let mut out = format!("# {}\n", serde_json::to_string(&header)?);
    for row in grid.values.chunks(grid.g) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn grid_from_text(text: &str) -> Result<DensityGrid> {
    let mut lines = text.lines();
    let head = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| Error::Parse { line: 1, message: "missing grid header".into() })?;
    let header: GridHeader =
        serde_json::from_str(head).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    let mut values = Vec::with_capacity(header.g * header.g);
    for (n, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: n + 2, message: format!("{e}") })?;
        if row.len() != header.g {
            return Err(Error::Parse { line: n + 2, message: format!("expected {} values", header.g) });
        }
        values.extend(row);
    }
    if values.len() != header.g * header.g {
        return Err(Error::Parse { line: 0, message: "grid has the wrong number of rows".into() });
    }
    Ok(DensityGrid {
        g: header.g,
        bounds: header.bounds,
        bandwidth: header.bandwidth,
        class: header.class,
        bin: header.bin,
        values,
    })
}

pub fn write_grid(path: &Path, grid: &DensityGrid) -> Result<()> {
    std::fs::write(path, grid_to_text(grid)?).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<DensityGrid> {
    grid_from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Bounds {
        Bounds { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 }
    }

    fn kde(points: &[[f64; 2]], bounds: Bounds) -> DensityGrid {
        density_map(points, bounds, 40, BandwidthRule::Scott, CorrectnessClass::Correct, None)
            .unwrap()
            .unwrap()
    }

    #[test]
    fn single_point_peaks_at_point() {
        let g = kde(&[[0.3, 0.7]], unit());
        assert!((g.total_mass() - 1.0).abs() < 1e-9);
        let (r, c) = g.peak();
        let center = g.cell_center(r, c);
        assert!((center[0] - 0.3).abs() <= 0.5 / 40.0 + 1e-12);
        assert!((center[1] - 0.7).abs() <= 0.5 / 40.0 + 1e-12);
    }

    #[test]
    fn duplicated_multiplicity_is_invariant() {
        let pts = [[0.2, 0.3], [0.5, 0.5], [0.8, 0.1], [0.4, 0.9]];
        let doubled: Vec<[f64; 2]> = pts.iter().flat_map(|p| [*p, *p]).collect();
        let a = kde(&pts, unit());
        let b = kde(&doubled, unit());
        assert_eq!(a.bandwidth, b.bandwidth);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn translation_covariance() {
        let pts = [[0.2, 0.3], [0.5, 0.5], [0.8, 0.1]];
        let shifted: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + 10.0, p[1] - 3.0]).collect();
        let a = kde(&pts, unit());
        let b = kde(&shifted, unit().translated(10.0, -3.0));
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn empty_members_signal() {
        let r = density_map(&[], unit(), 10, BandwidthRule::Scott, CorrectnessClass::Incorrect, Some(2)).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn export_round_trips_exactly() {
        let g = kde(&[[0.1, 0.2], [0.9, 0.4], [0.33, 0.33]], unit());
        let back = grid_from_text(&grid_to_text(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn enclosing_bounds_margin() {
        let b = Bounds::enclosing(&[[0.0, 0.0], [10.0, 2.0]], 0.05).unwrap();
        assert_eq!((b.x_min, b.x_max), (-0.5, 10.5));
        assert!((b.y_min + 0.1).abs() < 1e-12 && (b.y_max - 2.1).abs() < 1e-12);
        let degenerate = Bounds::enclosing(&[[1.0, 1.0]], 0.05).unwrap();
        assert_eq!(degenerate.width(), 1.0);
    }
}
