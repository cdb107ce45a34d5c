use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::Serialize;

use super::{write_grid, BinMetrics, Bounds, CorrectnessClass, DensityGrid, LandscapeBundle};
use crate::error::{Error, Result};

const PANEL: usize = 200;
const PAD: usize = 24;
const CELL_W: usize = PANEL + 2 * PAD;
const CELL_H: usize = PANEL + 2 * PAD;
const BLUE: [u8; 3] = [33, 102, 172];
const RED: [u8; 3] = [178, 24, 43];

/// Files written by [`render_landscape`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderedLandscape {
    pub svg: PathBuf,
    pub png: PathBuf,
    pub grids: Vec<PathBuf>,
    pub metadata: PathBuf,
    pub panels: usize,
    pub blank_panels: usize,
}

fn base_color(class: CorrectnessClass) -> [u8; 3] {
    match class {
        CorrectnessClass::Correct => BLUE,
        CorrectnessClass::Incorrect => RED,
    }
}

pub fn encode_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Data(format!("png: {e}")))?;
        w.write_image_data(rgb).map_err(|e| Error::Data(format!("png: {e}")))?;
    }
    Ok(out)
}

/// RGB pixels of one panel, top row first. Square-root scaling keeps the
/// low-density tails visible.
fn heat_pixels(grid: Option<&DensityGrid>, class: CorrectnessClass, size: usize) -> Vec<u8> {
    let Some(grid) = grid else {
        return [236u8, 236, 236].repeat(size * size);
    };
    let peak = grid.values.iter().fold(0.0f64, |m, v| m.max(*v));
    let base = base_color(class);
    let mut px = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        let row = grid.g - 1 - (r * grid.g / size);
        for c in 0..size {
            let col = c * grid.g / size;
            let t = if peak > 0.0 { (grid.at(row, col) / peak).sqrt() } else { 0.0 };
            for ch in 0..3 {
                px.push((255.0 * (1.0 - t) + f64::from(base[ch]) * t).round() as u8);
            }
        }
    }
    px
}

fn to_pixel(bounds: &Bounds, p: [f64; 2]) -> (f64, f64) {
    let x = (p[0] - bounds.x_min) / bounds.width() * PANEL as f64;
    let y = PANEL as f64 - (p[1] - bounds.y_min) / bounds.height() * PANEL as f64;
    (x, y)
}

fn star(cx: f64, cy: f64, r: f64) -> String {
    let mut pts = String::new();
    for i in 0..10 {
        let rad = if i % 2 == 0 { r } else { r * 0.45 };
        let a = std::f64::consts::PI * (i as f64) / 5.0 - std::f64::consts::FRAC_PI_2;
        let _ = write!(pts, "{:.2},{:.2} ", cx + rad * a.cos(), cy + rad * a.sin());
    }
    pts.trim_end().to_string()
}

fn anchor_marks(bounds: &Bounds, anchors: &[[f64; 2]]) -> String {
    let mut s = String::new();
    for (j, a) in anchors.iter().enumerate() {
        let (x, y) = to_pixel(bounds, *a);
        if j == 0 {
            let _ = write!(
                s,
                r##"<polygon class="anchor-correct" points="{}" fill="#111" stroke="#fff" stroke-width="0.8"/>"##,
                star(x, y, 7.0)
            );
        } else {
            let _ = write!(
                s,
                r##"<path class="anchor-incorrect" d="M{:.2},{:.2}l8,8m0,-8l-8,8" stroke="#444" stroke-width="2"/>"##,
                x - 4.0,
                y - 4.0
            );
        }
        let _ = write!(s, r#"<text x="{:.2}" y="{:.2}" font-size="9">{}</text>"#, x + 6.0, y - 6.0, (b'A' + j as u8) as char);
    }
    s
}

/// Marching-squares iso-lines of `grid` at `level`, in panel pixels.
fn contour_path(grid: &DensityGrid, level: f64) -> String {
    let g = grid.g;
    let cell = PANEL as f64 / g as f64;
    // Grid values sit at cell centers; row 0 is the bottom of the panel.
    let pt = |row: f64, col: f64| ((col + 0.5) * cell, PANEL as f64 - (row + 0.5) * cell);
    let lerp = |a: f64, b: f64| if (b - a).abs() < f64::MIN_POSITIVE { 0.5 } else { (level - a) / (b - a) };
    let mut d = String::new();
    for r in 0..g - 1 {
        for c in 0..g - 1 {
            let v = [grid.at(r, c), grid.at(r, c + 1), grid.at(r + 1, c + 1), grid.at(r + 1, c)];
            let idx = v.iter().enumerate().fold(0, |m, (i, x)| m | (usize::from(*x >= level) << i));
            if idx == 0 || idx == 15 {
                continue;
            }
            // Edge crossing points: bottom, right, top, left.
            let (rf, cf) = (r as f64, c as f64);
            let e = [
                pt(rf, cf + lerp(v[0], v[1])),
                pt(rf + lerp(v[1], v[2]), cf + 1.0),
                pt(rf + 1.0, cf + 1.0 - lerp(v[2], v[3])),
                pt(rf + 1.0 - lerp(v[3], v[0]), cf),
            ];
            let pairs: &[(usize, usize)] = match idx {
                1 | 14 => &[(3, 0)],
                2 | 13 => &[(0, 1)],
                3 | 12 => &[(3, 1)],
                4 | 11 => &[(1, 2)],
                5 => &[(3, 2), (0, 1)],
                6 | 9 => &[(0, 2)],
                7 | 8 => &[(3, 2)],
                10 => &[(3, 0), (1, 2)],
                _ => &[],
            };
            for (a, b) in pairs {
                let _ = write!(d, "M{:.1},{:.1}L{:.1},{:.1}", e[*a].0, e[*a].1, e[*b].0, e[*b].1);
            }
        }
    }
    d
}

fn panel_svg(
    out: &mut String,
    x0: usize,
    y0: usize,
    title: &str,
    grid: Option<&DensityGrid>,
    contour_grid: Option<&DensityGrid>,
    class: CorrectnessClass,
    bundle: &LandscapeBundle,
) -> Result<()> {
    let _ = write!(out, r#"<g transform="translate({x0},{y0})">"#);
    let _ = write!(out, r#"<text x="{}" y="-8" font-size="11" text-anchor="middle">{title}</text>"#, PANEL / 2);
    let png = encode_png(PANEL, PANEL, &heat_pixels(grid, class, PANEL))?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
    let _ = write!(
        out,
        r#"<image width="{PANEL}" height="{PANEL}" image-rendering="pixelated" href="data:image/png;base64,{b64}"/>"#
    );
    let stroke = match class {
        CorrectnessClass::Correct => "#08306b",
        CorrectnessClass::Incorrect => "#67000d",
    };
    if let Some(cg) = contour_grid {
        let peak = cg.values.iter().fold(0.0f64, |m, v| m.max(*v));
        for frac in [0.25, 0.5, 0.75] {
            let d = contour_path(cg, peak * frac);
            if !d.is_empty() {
                let _ = write!(out, r#"<path d="{d}" fill="none" stroke="{stroke}" stroke-width="0.7"/>"#);
            }
        }
    }
    if grid.is_none() {
        let _ = write!(
            out,
            r##"<text x="{}" y="{}" font-size="11" fill="#666" text-anchor="middle">no {} states</text>"##,
            PANEL / 2,
            PANEL / 2,
            class.as_str()
        );
    }
    out.push_str(&anchor_marks(&bundle.bounds, &bundle.anchors));
    let _ = write!(out, r##"<rect width="{PANEL}" height="{PANEL}" fill="none" stroke="#999"/></g>"##);
    Ok(())
}

#[derive(Serialize)]
struct FigureMetadata<'a> {
    projector: super::ProjectorTag,
    seed: Option<u64>,
    bins: usize,
    render_grid: usize,
    stats_grid: usize,
    bandwidth: super::BandwidthRule,
    bounds: &'a Bounds,
    tsne_effective_perplexity: Option<f64>,
    tsne_final_kl: Option<f64>,
    panels: Vec<PanelMeta>,
}

#[derive(Serialize)]
struct PanelMeta {
    bin: usize,
    label: String,
    class: &'static str,
    states: usize,
    bandwidth: Option<f64>,
    grid_file: Option<String>,
}

/// Writes the panel figure (SVG with a PNG twin), one text export per
/// non-empty grid, and a metadata JSON into `dir`.
pub fn render_landscape(bundle: &LandscapeBundle, dir: &Path) -> Result<RenderedLandscape> {
    fs::create_dir_all(dir.join("grids")).map_err(|e| Error::io(dir, e))?;
    let bins = bundle.panels.len();
    let classes = [CorrectnessClass::Correct, CorrectnessClass::Incorrect];
    let (w, h) = (bins * CELL_W, 2 * CELL_H + 20);

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#
    );
    let _ = write!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let mut raster = [255u8; 3].repeat(w * h);
    let mut grids = Vec::new();
    let mut meta = Vec::new();
    let mut blank = 0;

    for (ci, class) in classes.into_iter().enumerate() {
        for (b, panel) in bundle.panels.iter().enumerate() {
            let (x0, y0) = (b * CELL_W + PAD, ci * CELL_H + PAD + 10);
            let grid = panel.grid(class);
            let contour = bundle.stats_panels.get(b).and_then(|p| p.grid(class));
            let title = format!("{} ({})", panel.bin.label(), class.as_str());
            panel_svg(&mut svg, x0, y0, &title, grid, contour, class, bundle)?;

            let px = heat_pixels(grid, class, PANEL);
            for r in 0..PANEL {
                let dst = ((y0 + r) * w + x0) * 3;
                raster[dst..dst + PANEL * 3].copy_from_slice(&px[r * PANEL * 3..(r + 1) * PANEL * 3]);
            }
            for (j, a) in bundle.anchors.iter().enumerate() {
                let (x, y) = to_pixel(&bundle.bounds, *a);
                let shade = if j == 0 { 0u8 } else { 110 };
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        if j != 0 && dx.abs() != dy.abs() {
                            continue;
                        }
                        let (px_, py_) = (x as i64 + dx, y as i64 + dy);
                        if (0..PANEL as i64).contains(&px_) && (0..PANEL as i64).contains(&py_) {
                            let at = ((y0 + py_ as usize) * w + x0 + px_ as usize) * 3;
                            raster[at..at + 3].fill(shade);
                        }
                    }
                }
            }

            let states = match class {
                CorrectnessClass::Correct => panel.correct_states,
                CorrectnessClass::Incorrect => panel.incorrect_states,
            };
            let grid_file = match grid {
                Some(g) => {
                    let name = format!("bin{}_{}.grid", b, class.as_str());
                    let path = dir.join("grids").join(&name);
                    write_grid(&path, g)?;
                    grids.push(path);
                    Some(format!("grids/{name}"))
                }
                None => {
                    blank += 1;
                    None
                }
            };
            meta.push(PanelMeta {
                bin: b,
                label: panel.bin.label(),
                class: class.as_str(),
                states,
                bandwidth: grid.map(|g| g.bandwidth),
                grid_file,
            });
        }
    }
    svg.push_str("</svg>\n");

    let svg_path = dir.join("landscape.svg");
    fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    let png_path = dir.join("landscape.png");
    fs::write(&png_path, encode_png(w, h, &raster)?).map_err(|e| Error::io(&png_path, e))?;

    let md = FigureMetadata {
        projector: bundle.embedding.projector,
        seed: bundle.embedding.seed,
        bins,
        render_grid: bundle.config.render_grid,
        stats_grid: bundle.config.stats_grid,
        bandwidth: bundle.config.bandwidth,
        bounds: &bundle.bounds,
        tsne_effective_perplexity: bundle.tsne.as_ref().map(|t| t.effective_perplexity),
        tsne_final_kl: bundle.tsne.as_ref().map(|t| t.final_kl),
        panels: meta,
    };
    let md_path = dir.join("figure.json");
    fs::write(&md_path, serde_json::to_string_pretty(&md)? + "\n").map_err(|e| Error::io(&md_path, e))?;

    Ok(RenderedLandscape { svg: svg_path, png: png_path, grids, metadata: md_path, panels: 2 * bins, blank_panels: blank })
}

/// Grouped bar chart: one block per metric, one blue/red bar pair per bin.
pub fn render_metrics_chart(rows: &[BinMetrics], bins: usize, path: &Path) -> Result<()> {
    let metrics: [(&str, fn(&BinMetrics) -> f64); 3] = [
        ("consistency", |r| r.mean_consistency),
        ("uncertainty", |r| r.mean_uncertainty),
        ("perplexity", |r| r.mean_perplexity),
    ];
    let (block_w, block_h, bar_w) = (40 * bins + 40, 180usize, 14usize);
    let (w, h) = (metrics.len() * block_w + 20, block_h + 80);
    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif"><rect width="{w}" height="{h}" fill="white"/>"#
    );
    for (m, (name, get)) in metrics.iter().enumerate() {
        let x0 = 20 + m * block_w;
        let top = rows.iter().map(get).fold(0.0f64, f64::max);
        let scale = if top > 0.0 { block_h as f64 / top } else { 0.0 };
        let _ = write!(svg, r#"<text x="{}" y="20" font-size="12" text-anchor="middle">{name}</text>"#, x0 + block_w / 2 - 20);
        let base_y = 30 + block_h;
        let _ = write!(svg, r##"<line x1="{x0}" y1="{base_y}" x2="{}" y2="{base_y}" stroke="#333"/>"##, x0 + block_w - 40);
        for b in 0..bins {
            for (ci, class) in [CorrectnessClass::Correct, CorrectnessClass::Incorrect].into_iter().enumerate() {
                let Some(r) = rows.iter().find(|r| r.bin.index == b && r.class == class) else { continue };
                let v = get(r);
                let bh = v * scale;
                let [cr, cg, cb] = base_color(class);
                let _ = write!(
                    svg,
                    r#"<rect x="{}" y="{:.2}" width="{bar_w}" height="{:.2}" fill="rgb({cr},{cg},{cb})"><title>{} {}: {:.4}</title></rect>"#,
                    x0 + b * 40 + ci * bar_w,
                    base_y as f64 - bh,
                    bh,
                    r.bin.label(),
                    class.as_str(),
                    v
                );
            }
            let _ = write!(
                svg,
                r#"<text x="{}" y="{}" font-size="9" text-anchor="middle">{}</text>"#,
                x0 + b * 40 + bar_w,
                base_y + 14,
                b + 1
            );
        }
    }
    let _ = write!(
        svg,
        r#"<text x="20" y="{}" font-size="10">bars per progress bin; blue = correct, red = incorrect</text></svg>"#,
        h - 16
    );
    svg.push('\n');
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::{density_map, read_grid, BandwidthRule, BinPanel, Embedding2D, LandscapeConfig, ProjectorTag};
    use crate::landscape::progress_bins;

    fn bundle(with_incorrect: bool) -> LandscapeBundle {
        let pts: Vec<[f64; 2]> = (0..12).map(|i| [(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        let bounds = Bounds::enclosing(&pts, 0.05).unwrap();
        let mk = |g, class, b| {
            if class == CorrectnessClass::Incorrect && !with_incorrect {
                None
            } else {
                density_map(&pts, bounds, g, BandwidthRule::Scott, class, Some(b)).unwrap()
            }
        };
        let panels = |g| {
            progress_bins(5)
                .unwrap()
                .into_iter()
                .map(|bin| BinPanel {
                    bin,
                    correct: mk(g, CorrectnessClass::Correct, bin.index),
                    incorrect: mk(g, CorrectnessClass::Incorrect, bin.index),
                    correct_states: 12,
                    incorrect_states: if with_incorrect { 12 } else { 0 },
                })
                .collect()
        };
        LandscapeBundle {
            embedding: Embedding2D { coords: vec![], layout: vec![], projector: ProjectorTag::Pca, seed: None },
            bounds,
            anchors: vec![[0.0, 0.5], [0.5, 0.0], [-0.5, 0.0]],
            panels: panels(60),
            stats_panels: panels(20),
            tsne: None,
            config: LandscapeConfig::default(),
        }
    }

    #[test]
    fn ten_panels_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle(true);
        let out = render_landscape(&b, dir.path()).unwrap();
        assert_eq!(out.panels, 10);
        assert_eq!(out.blank_panels, 0);
        let svg = fs::read_to_string(&out.svg).unwrap();
        assert_eq!(svg.matches("<image ").count(), 10);
        assert_eq!(svg.matches("anchor-correct").count(), 10);
        assert_eq!(svg.matches("anchor-incorrect").count(), 20);
        let g = read_grid(&dir.path().join("grids/bin3_incorrect.grid")).unwrap();
        assert_eq!(&g, b.panels[3].incorrect.as_ref().unwrap());
        assert!(fs::read(&out.png).unwrap().starts_with(b"\x89PNG"));
    }

    #[test]
    fn empty_incorrect_class_is_blank() {
        let dir = tempfile::tempdir().unwrap();
        let out = render_landscape(&bundle(false), dir.path()).unwrap();
        assert_eq!(out.blank_panels, 5);
        let svg = fs::read_to_string(&out.svg).unwrap();
        assert_eq!(svg.matches("no incorrect states").count(), 5);
        assert_eq!(out.grids.len(), 5);
    }

    #[test]
    fn unwritable_path_errors() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(render_landscape(&bundle(true), &f.path().join("x")), Err(Error::Io { .. })));
    }
}
