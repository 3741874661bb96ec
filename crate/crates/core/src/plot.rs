//! SVG figures: annotated heatmaps for transfer matrices, line plots for sweeps,
//! loss curves for runs and bar charts for comparison reports.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::harness::ReportRow;
use crate::training::read_epoch_summaries;

/// Labelled matrix of optional values; `None` marks a failed cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

fn draw_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn palette(v: f64) -> RGBColor {
    // white to dark blue
    let t = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    RGBColor(lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

/// One colored, annotated square per cell; values are expected in `[0, 1]`.
pub fn heatmap(path: &Path, grid: &Grid, title: &str) -> Result<()> {
    let (nr, nc) = (grid.rows.len(), grid.cols.len());
    if nr == 0 || nc == 0 || grid.cells.len() != nr || grid.cells.iter().any(|r| r.len() != nc) {
        return Err(Error::Plot("heatmap needs a non-empty rectangular grid".into()));
    }
    let cell = 90i32;
    let (left, top) = (140i32, 60i32);
    let w = left + cell * nc as i32 + 20;
    let h = top + cell * nr as i32 + 40;
    let root = SVGBackend::new(path, (w as u32, h as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    root.draw(&Text::new(title.to_string(), (10, 15), ("sans-serif", 16)))
        .map_err(draw_err)?;
    for (j, c) in grid.cols.iter().enumerate() {
        let x = left + cell * j as i32 + 8;
        root.draw(&Text::new(c.clone(), (x, top - 18), ("sans-serif", 13)))
            .map_err(draw_err)?;
    }
    for (i, r) in grid.rows.iter().enumerate() {
        let y = top + cell * i as i32;
        root.draw(&Text::new(r.clone(), (8, y + cell / 2 - 6), ("sans-serif", 13)))
            .map_err(draw_err)?;
        for (j, v) in grid.cells[i].iter().enumerate() {
            let x = left + cell * j as i32;
            let fill = v.map_or(RGBColor(200, 200, 200), palette);
            root.draw(&Rectangle::new([(x, y), (x + cell - 2, y + cell - 2)], fill.filled()))
                .map_err(draw_err)?;
            let label = v.map_or_else(|| "failed".to_string(), |v| format!("{v:.2}"));
            let ink = if v.is_some_and(|v| v > 0.55) { WHITE } else { BLACK };
            let style = TextStyle::from(("sans-serif", 16).into_font()).color(&ink);
            root.draw(&Text::new(label, (x + cell / 2 - 16, y + cell / 2 - 8), style))
                .map_err(draw_err)?;
        }
    }
    root.present().map_err(draw_err)?;
    Ok(())
}

fn padded_range(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(1e-3);
    (lo - pad, hi + pad)
}

/// A single series of points joined by lines, with markers.
pub fn line_plot(path: &Path, points: &[(f64, f64)], x_label: &str, y_label: &str, title: &str) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Plot("nothing to plot".into()));
    }
    let (x0, x1) = padded_range(points.iter().map(|p| p.0));
    let (y0, y1) = padded_range(points.iter().map(|p| p.1));
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(draw_err)?;
    chart
        .draw_series(LineSeries::new(points.iter().copied(), &BLUE))
        .map_err(draw_err)?;
    chart
        .draw_series(points.iter().map(|p| Circle::new(*p, 4, BLUE.filled())))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Per-epoch contrastive and task losses of the run in `run_dir`.
pub fn loss_curves(path: &Path, run_dir: &Path) -> Result<()> {
    let epochs = read_epoch_summaries(run_dir)?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let contrast: Vec<(f64, f64)> = epochs
        .iter()
        .filter_map(|e| e.contrast_loss.map(|l| (e.epoch as f64, l)))
        .collect();
    if !contrast.is_empty() {
        series.push(("contrastive".into(), contrast));
    }
    if let Some(first) = epochs.first() {
        for task in first.task_loss.keys() {
            let pts = epochs
                .iter()
                .filter_map(|e| e.task_loss.get(task).map(|l| (e.epoch as f64, *l)))
                .collect();
            series.push((task.clone(), pts));
        }
    }
    if series.iter().all(|(_, p)| p.is_empty()) {
        return Err(Error::Plot(format!("{} has no completed epochs", run_dir.display())));
    }
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (x0, x1) = padded_range(all.clone().map(|p| p.0));
    let (y0, y1) = padded_range(all.map(|p| p.1));
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training losses", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("loss")
        .draw()
        .map_err(draw_err)?;
    for (i, (name, pts)) in series.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(draw_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Mean accuracy per condition with a ±1 std whisker.
pub fn comparison_bars(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let done: Vec<&ReportRow> = rows.iter().filter(|r| r.mean.is_some()).collect();
    if done.is_empty() {
        return Err(Error::Plot("report has no completed rows".into()));
    }
    let n = done.len();
    let top = done
        .iter()
        .map(|r| r.mean.unwrap_or(0.0) + r.std.unwrap_or(0.0))
        .fold(0.0f64, f64::max)
        .max(0.1)
        * 1.1;
    let root = SVGBackend::new(path, (160 + 60 * n as u32, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Mean accuracy over seeds", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(120)
        .y_label_area_size(52)
        .build_cartesian_2d(0f64..n as f64, 0f64..top)
        .map_err(draw_err)?;
    let labels: Vec<String> = done.iter().map(|r| r.condition.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            labels.get(i).cloned().unwrap_or_default()
        })
        .x_label_style(("sans-serif", 11).into_font().transform(FontTransform::Rotate90))
        .y_desc("accuracy")
        .draw()
        .map_err(draw_err)?;
    for (i, r) in done.iter().enumerate() {
        let (m, s) = (r.mean.unwrap_or(0.0), r.std.unwrap_or(0.0));
        let x = i as f64;
        chart
            .draw_series(std::iter::once(Rectangle::new([(x + 0.15, 0.0), (x + 0.85, m)], BLUE.mix(0.6).filled())))
            .map_err(draw_err)?;
        chart
            .draw_series(std::iter::once(PathElement::new(vec![(x + 0.5, m - s), (x + 0.5, m + s)], BLACK)))
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)?;
    Ok(())
}
