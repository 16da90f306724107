//! Four-panel SVG scatter of the clustering-transformer stages.
//!
//! Each panel projects one stage's row vectors to 2-D with its own PCA
//! fit, draws salient points in red and non-salient in blue, and marks the
//! cluster mean of each side. Output is a plain string built with fixed
//! number formatting, so identical inputs yield identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::pca::pca_project;
use crate::tau::TauStages;
use crate::tensor::Tensor;

const PANEL_W: f64 = 330.0;
const PANEL_H: f64 = 280.0;
const MARGIN: f64 = 14.0;
const SALIENT_COLOR: &str = "#d62728";
const NON_SALIENT_COLOR: &str = "#1f77b4";

struct Panel<'a> {
    caption: &'a str,
    points: &'a Tensor,
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

fn panel_svg(out: &mut String, panel: &Panel, labels: &[bool], x0: f64, y0: f64) -> Result<()> {
    let proj = pca_project(panel.points, 2.min(panel.points.cols()))?;
    let k = proj.rows();
    let coords: Vec<(f64, f64)> = (0..k)
        .map(|i| {
            let row = proj.row(i);
            (row[0], if row.len() > 1 { row[1] } else { 0.0 })
        })
        .collect();
    let (mut min_x, mut max_x, mut min_y, mut max_y) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &coords {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let pad_x = ((max_x - min_x) * 0.1).max(1e-6);
    let pad_y = ((max_y - min_y) * 0.1).max(1e-6);
    let (min_x, max_x) = (min_x - pad_x, max_x + pad_x);
    let (min_y, max_y) = (min_y - pad_y, max_y + pad_y);
    let plot_x = x0 + 8.0;
    let plot_y = y0 + 26.0;
    let plot_w = PANEL_W - 16.0;
    let plot_h = PANEL_H - 40.0;
    let sx = |x: f64| plot_x + (x - min_x) / (max_x - min_x) * plot_w;
    let sy = |y: f64| plot_y + plot_h - (y - min_y) / (max_y - min_y) * plot_h;

    writeln!(
        out,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#888" stroke-width="1"/>"##,
        fmt(plot_x),
        fmt(plot_y),
        fmt(plot_w),
        fmt(plot_h)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="monospace" font-size="13">{}</text>"#,
        fmt(x0 + 8.0),
        fmt(y0 + 16.0),
        panel.caption
    )
    .unwrap();
    for (i, &(x, y)) in coords.iter().enumerate() {
        let color = if labels[i] { SALIENT_COLOR } else { NON_SALIENT_COLOR };
        writeln!(
            out,
            r#"<circle cx="{}" cy="{}" r="3" fill="{}" fill-opacity="0.8"/>"#,
            fmt(sx(x)),
            fmt(sy(y)),
            color
        )
        .unwrap();
    }
    for salient in [true, false] {
        let members: Vec<&(f64, f64)> = coords
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == salient)
            .map(|(c, _)| c)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mx = members.iter().map(|(x, _)| x).sum::<f64>() / members.len() as f64;
        let my = members.iter().map(|(_, y)| y).sum::<f64>() / members.len() as f64;
        let (cx, cy) = (sx(mx), sy(my));
        for (dx1, dy1, dx2, dy2) in [(-5.0, -5.0, 5.0, 5.0), (-5.0, 5.0, 5.0, -5.0)] {
            writeln!(
                out,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="2"/>"#,
                fmt(cx + dx1),
                fmt(cy + dy1),
                fmt(cx + dx2),
                fmt(cy + dy2)
            )
            .unwrap();
        }
    }
    Ok(())
}

/// Render the four stage panels as a standalone SVG document.
pub fn projection_plot_svg(stages: &TauStages) -> Result<String> {
    let labels = &stages.row_labels;
    let salient = labels.iter().filter(|&&l| l).count();
    let non_salient = labels.len() - salient;
    let width = MARGIN * 3.0 + PANEL_W * 2.0;
    let height = MARGIN * 3.0 + PANEL_H * 2.0 + 28.0;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        fmt(width),
        fmt(height),
        fmt(width),
        fmt(height)
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let panels = [
        Panel { caption: "(a) context vectors", points: &stages.input },
        Panel { caption: "(b) cluster generation", points: &stages.generated },
        Panel { caption: "(c) cluster normalization", points: &stages.normalized },
        Panel { caption: "(d) cluster shrinking", points: &stages.shrunk },
    ];
    for (i, panel) in panels.iter().enumerate() {
        let x0 = MARGIN + (i % 2) as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN + (i / 2) as f64 * (PANEL_H + MARGIN);
        panel_svg(&mut out, panel, labels, x0, y0)?;
    }
    let legend_y = height - 12.0;
    writeln!(
        out,
        r#"<circle cx="{}" cy="{}" r="4" fill="{}"/><text x="{}" y="{}" font-family="monospace" font-size="13">salient (n={})</text>"#,
        fmt(MARGIN + 6.0),
        fmt(legend_y - 4.0),
        SALIENT_COLOR,
        fmt(MARGIN + 16.0),
        fmt(legend_y),
        salient
    )
    .unwrap();
    writeln!(
        out,
        r#"<circle cx="{}" cy="{}" r="4" fill="{}"/><text x="{}" y="{}" font-family="monospace" font-size="13">non-salient (n={})</text>"#,
        fmt(MARGIN + 180.0),
        fmt(legend_y - 4.0),
        NON_SALIENT_COLOR,
        fmt(MARGIN + 190.0),
        fmt(legend_y),
        non_salient
    )
    .unwrap();
    writeln!(out, "</svg>").unwrap();
    Ok(out)
}

/// Write the four-panel plot to a file.
pub fn emit_projection_plot(stages: &TauStages, path: &Path) -> Result<()> {
    let svg = projection_plot_svg(stages)?;
    std::fs::write(path, svg)?;
    Ok(())
}
