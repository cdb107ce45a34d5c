//! 2D landscapes of reasoning states.
//!
//! The pooled feature matrix is projected to the plane (t-SNE by default, PCA
//! or precomputed coordinates as alternatives). States are then sliced by
//! reasoning progress and correctness, and each slice becomes a kernel
//! density grid over one shared bounding box.

mod bins;
mod density;
mod pca;
mod render;
mod tsne;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_feature_matrix, ColumnRef, FeatureMatrix, FeatureTrajectory};
use crate::parallel::{self, Execution};

pub use bins::{assign_progress_bins, bin_of, progress_bins, ProgressBin};
pub use density::{
    density_map, grid_from_text, grid_to_text, read_grid, write_grid, BandwidthRule, Bounds, CorrectnessClass,
    DensityGrid,
};
pub use pca::{pca_embed, pca_fit, PcaFit};
pub use render::{encode_png, render_landscape, render_metrics_chart, RenderedLandscape};
pub use tsne::{joint_affinities, kl_divergence, tsne_embed, tsne_embed_with, tsne_points, TsneParams, TsneReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectorTag {
    Tsne,
    Pca,
    External,
}

/// One 2D point per feature-matrix column, in column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub coords: Vec<[f64; 2]>,
    pub layout: Vec<ColumnRef>,
    pub projector: ProjectorTag,
    pub seed: Option<u64>,
}

impl Embedding2D {
    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.layout.len() {
            return Err(Error::Data(format!(
                "{} coordinates for {} columns",
                self.coords.len(),
                self.layout.len()
            )));
        }
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("embedding has non-finite coordinates".into()));
        }
        Ok(())
    }

    /// Anchor coordinates indexed by choice.
    pub fn anchors(&self) -> Vec<[f64; 2]> {
        let mut out: Vec<(usize, [f64; 2])> = self
            .layout
            .iter()
            .zip(&self.coords)
            .filter_map(|(r, c)| match r {
                ColumnRef::Anchor { choice } => Some((*choice, *c)),
                ColumnRef::State { .. } => None,
            })
            .collect();
        out.sort_by_key(|(j, _)| *j);
        out.into_iter().map(|(_, c)| c).collect()
    }

    /// Coordinates of each trajectory's states, in state order.
    pub fn trajectory_paths(&self, n_trajectories: usize) -> Vec<Vec<[f64; 2]>> {
        let mut paths = vec![Vec::new(); n_trajectories];
        for (r, c) in self.layout.iter().zip(&self.coords) {
            if let ColumnRef::State { trajectory, .. } = r {
                if let Some(p) = paths.get_mut(*trajectory) {
                    p.push(*c);
                }
            }
        }
        paths
    }

    /// CSV with one row per column: `column,kind,trajectory,state,choice,x,y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("column,kind,trajectory,state,choice,x,y\n");
        for (i, (r, c)) in self.layout.iter().zip(&self.coords).enumerate() {
            let row = match r {
                ColumnRef::State { trajectory, state } => format!("{i},state,{trajectory},{state},,"),
                ColumnRef::Anchor { choice } => format!("{i},anchor,,,{choice},"),
            };
            out.push_str(&format!("{row}{:?},{:?}\n", c[0], c[1]));
        }
        out
    }

    /// Reads externally computed coordinates (the last two CSV fields of
    /// each row, rows in column order) for `matrix`.
    pub fn from_csv(text: &str, matrix: &FeatureMatrix) -> Result<Self> {
        let mut coords = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 2 {
                return Err(Error::Parse { line: n + 1, message: "expected x,y fields".into() });
            }
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse { line: n + 1, message: e.to_string() })
            };
            coords.push([parse(fields[fields.len() - 2])?, parse(fields[fields.len() - 1])?]);
        }
        let emb = Embedding2D { coords, layout: matrix.layout.clone(), projector: ProjectorTag::External, seed: None };
        emb.validate()?;
        Ok(emb)
    }
}

/// Projection strategy for the feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Projector {
    Tsne(TsneParams),
    Pca,
    /// Coordinates computed elsewhere (UMAP, PaCMAP, ...), in CSV form.
    External { csv: String },
}

impl Projector {
    pub fn project(&self, exec: Execution, matrix: &FeatureMatrix) -> Result<(Embedding2D, Option<TsneReport>)> {
        match self {
            Projector::Tsne(p) => tsne_embed_with(exec, matrix, p).map(|(e, r)| (e, Some(r))),
            Projector::Pca => pca_embed(matrix).map(|(e, _)| (e, None)),
            Projector::External { csv } => Embedding2D::from_csv(csv, matrix).map(|e| (e, None)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConfig {
    pub bins: usize,
    pub render_grid: usize,
    pub stats_grid: usize,
    pub bandwidth: BandwidthRule,
    /// Fractional margin added around the bounding box of states and anchors.
    pub margin: f64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig { bins: 5, render_grid: 200, stats_grid: 50, bandwidth: BandwidthRule::Scott, margin: 0.05 }
    }
}

/// Density grids of one progress bin, split by correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPanel {
    pub bin: ProgressBin,
    pub correct: Option<DensityGrid>,
    pub incorrect: Option<DensityGrid>,
    pub correct_states: usize,
    pub incorrect_states: usize,
}

impl BinPanel {
    pub fn grid(&self, class: CorrectnessClass) -> Option<&DensityGrid> {
        match class {
            CorrectnessClass::Correct => self.correct.as_ref(),
            CorrectnessClass::Incorrect => self.incorrect.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeBundle {
    pub embedding: Embedding2D,
    pub bounds: Bounds,
    /// Anchor coordinates; index 0 is the correct choice.
    pub anchors: Vec<[f64; 2]>,
    /// Rendering-resolution grids.
    pub panels: Vec<BinPanel>,
    /// Statistics-resolution grids, same bins and bounds.
    pub stats_panels: Vec<BinPanel>,
    pub tsne: Option<TsneReport>,
    pub config: LandscapeConfig,
}

/// Members of each (bin, class) slice: coordinates of the states.
pub fn slice_states(
    ftrajs: &[FeatureTrajectory],
    embedding: &Embedding2D,
    bins: usize,
) -> Result<Vec<[Vec<[f64; 2]>; 2]>> {
    let mut slices = vec![[Vec::new(), Vec::new()]; bins];
    for (r, c) in embedding.layout.iter().zip(&embedding.coords) {
        let ColumnRef::State { trajectory, state } = r else { continue };
        let ft = ftrajs
            .get(*trajectory)
            .ok_or_else(|| Error::Data(format!("embedding cites unknown trajectory {trajectory}")))?;
        let Some(correct) = ft.is_correct else { continue };
        let b = bin_of(state + 1, ft.n(), bins);
        slices[b][usize::from(!correct)].push(*c);
    }
    Ok(slices)
}

fn grids_for(
    exec: Execution,
    slices: &[[Vec<[f64; 2]>; 2]],
    bounds: Bounds,
    g: usize,
    cfg: &LandscapeConfig,
) -> Result<Vec<BinPanel>> {
    let bin_defs = progress_bins(cfg.bins)?;
    let jobs: Vec<(usize, CorrectnessClass)> = (0..cfg.bins)
        .flat_map(|b| [(b, CorrectnessClass::Correct), (b, CorrectnessClass::Incorrect)])
        .collect();
    let grids = parallel::map(exec, &jobs, |(b, class)| {
        let members = &slices[*b][usize::from(*class == CorrectnessClass::Incorrect)];
        density_map(members, bounds, g, cfg.bandwidth, *class, Some(*b))
    });
    let mut grids = grids.into_iter();
    bin_defs
        .into_iter()
        .map(|bin| {
            let correct = grids.next().expect("correct grid")?;
            let incorrect = grids.next().expect("incorrect grid")?;
            Ok(BinPanel {
                bin,
                correct,
                incorrect,
                correct_states: slices[bin.index][0].len(),
                incorrect_states: slices[bin.index][1].len(),
            })
        })
        .collect()
}

/// Projects `ftrajs` and builds every density panel.
pub fn build_landscape(
    exec: Execution,
    ftrajs: &[FeatureTrajectory],
    k: usize,
    projector: &Projector,
    cfg: &LandscapeConfig,
) -> Result<LandscapeBundle> {
    let matrix = build_feature_matrix(ftrajs, k)?;
    let (embedding, tsne) = projector.project(exec, &matrix)?;
    landscape_from_embedding(exec, ftrajs, embedding, tsne, cfg)
}

pub fn landscape_from_embedding(
    exec: Execution,
    ftrajs: &[FeatureTrajectory],
    embedding: Embedding2D,
    tsne: Option<TsneReport>,
    cfg: &LandscapeConfig,
) -> Result<LandscapeBundle> {
    embedding.validate()?;
    let bounds = Bounds::enclosing(&embedding.coords, cfg.margin)?;
    let slices = slice_states(ftrajs, &embedding, cfg.bins)?;
    let panels = grids_for(exec, &slices, bounds, cfg.render_grid, cfg)?;
    let stats_panels = grids_for(exec, &slices, bounds, cfg.stats_grid, cfg)?;
    Ok(LandscapeBundle {
        anchors: embedding.anchors(),
        embedding,
        bounds,
        panels,
        stats_panels,
        tsne,
        config: cfg.clone(),
    })
}

/// Per-bin metric means for one correctness class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMetrics {
    pub bin: ProgressBin,
    pub class: CorrectnessClass,
    pub states: usize,
    pub mean_consistency: f64,
    pub mean_uncertainty: f64,
    pub mean_perplexity: f64,
}

/// Means of consistency, uncertainty and thought perplexity over the states
/// in each (bin, class). Slices without states are omitted.
pub fn aggregate_metrics_by_bin(ftrajs: &[FeatureTrajectory], bins: usize) -> Result<Vec<BinMetrics>> {
    let defs = progress_bins(bins)?;
    // [bin][class] -> (count, Σ consistency, Σ uncertainty, Σ perplexity)
    let mut acc = vec![[(0usize, 0.0f64, 0.0f64, 0.0f64); 2]; bins];
    for ft in ftrajs {
        let Some(correct) = ft.is_correct else { continue };
        let n = ft.n();
        for i in 0..n {
            let slot = &mut acc[bin_of(i + 1, n, bins)][usize::from(!correct)];
            slot.0 += 1;
            slot.1 += f64::from(ft.consistency[i]);
            slot.2 += ft.uncertainty[i];
            slot.3 += ft.thought_perplexities[i];
        }
    }
    let mut out = Vec::new();
    for (b, per_class) in acc.iter().enumerate() {
        for (ci, class) in [CorrectnessClass::Correct, CorrectnessClass::Incorrect].into_iter().enumerate() {
            let (count, c, u, p) = per_class[ci];
            if count == 0 {
                continue;
            }
            let n = count as f64;
            out.push(BinMetrics {
                bin: defs[b],
                class,
                states: count,
                mean_consistency: c / n,
                mean_uncertainty: u / n,
                mean_perplexity: p / n,
            });
        }
    }
    Ok(out)
}

/// CSV rendering of a metrics table.
pub fn metrics_to_csv(rows: &[BinMetrics]) -> String {
    let mut out = String::from("bin,lower,upper,class,states,consistency,uncertainty,perplexity\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:?},{:?},{:?}\n",
            r.bin.index,
            r.bin.lower,
            r.bin.upper,
            r.class.as_str(),
            r.states,
            r.mean_consistency,
            r.mean_uncertainty,
            r.mean_perplexity
        ));
    }
    out
}
