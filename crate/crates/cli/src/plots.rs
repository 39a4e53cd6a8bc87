use std::path::Path;

use anyhow::{anyhow, Result};
use ndarray::Array2;
use plotters::prelude::*;

const SIZE: (u32, u32) = (720, 480);

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

/// Histogram densities on a shared grid of `bins` cells.
pub fn densities(real: &[f64], generated: &[f64], bins: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut all: Vec<f64> = real.iter().chain(generated).copied().filter(|v| v.is_finite()).collect();
    all.sort_by(f64::total_cmp);
    let lo = all[(all.len() as f64 * 0.001) as usize];
    let hi = all[((all.len() as f64 * 0.999) as usize).min(all.len() - 1)];
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let hist = |x: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in x {
            let b = ((v - lo) / width).floor();
            if b >= 0.0 && (b as usize) < bins {
                h[b as usize] += 1.0;
            }
        }
        h.iter().map(|c| c / (x.len() as f64 * width)).collect::<Vec<_>>()
    };
    let centers = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
    (centers, hist(real), hist(generated))
}

pub fn density_overlay(path: &Path, title: &str, real: &[f64], generated: &[f64]) -> Result<()> {
    let (x, r, g) = densities(real, generated, 80);
    let ymax = r.iter().chain(&g).copied().fold(0.0, f64::max).max(1e-12) * 1.05;
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x[0]..x[x.len() - 1], 0.0..ymax)
        .map_err(err)?;
    chart.configure_mesh().x_desc("value").y_desc("density").draw().map_err(err)?;
    for (series, color, name) in [(&r, BLUE, "real"), (&g, RED, "generated")] {
        chart
            .draw_series(LineSeries::new(x.iter().copied().zip(series.iter().copied()), color.stroke_width(2)))
            .map_err(err)?
            .label(name)
            .legend(move |(a, b)| PathElement::new(vec![(a, b), (a + 18, b)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Lag curves: one real line and one generated line per panel.
pub fn acf_overlay(path: &Path, panels: &[(&str, Vec<f64>, Vec<f64>)]) -> Result<()> {
    let root = SVGBackend::new(path, (SIZE.0, SIZE.1 / 2 * panels.len().max(1) as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let areas = root.split_evenly((panels.len().max(1), 1));
    for ((name, real, generated), area) in panels.iter().zip(areas) {
        let n = real.len().max(1);
        let lo = real.iter().chain(generated).copied().fold(0.0, f64::min).min(-0.05);
        let hi = real.iter().chain(generated).copied().fold(0.0, f64::max).max(0.05);
        let mut chart = ChartBuilder::on(&area)
            .caption(*name, ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(28)
            .y_label_area_size(48)
            .build_cartesian_2d(1.0..n as f64, lo..hi)
            .map_err(err)?;
        chart.configure_mesh().x_desc("lag").draw().map_err(err)?;
        for (series, color) in [(real, BLUE), (generated, RED)] {
            let pts = series.iter().enumerate().map(|(i, v)| ((i + 1) as f64, *v));
            chart.draw_series(LineSeries::new(pts, color.stroke_width(2))).map_err(err)?;
        }
    }
    root.present().map_err(err)?;
    Ok(())
}

/// Heat map of a square matrix on a symmetric color scale.
pub fn heatmap(path: &Path, title: &str, m: &Array2<f64>) -> Result<()> {
    let n = m.nrows();
    let scale = m.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    let root = SVGBackend::new(path, (560, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(28)
        .y_label_area_size(28)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(err)?;
    chart.configure_mesh().disable_mesh().draw().map_err(err)?;
    chart
        .draw_series(m.indexed_iter().map(|((i, j), &v)| {
            let t = (v / scale).clamp(-1.0, 1.0);
            let fade = (255.0 * (1.0 - t.abs())) as u8;
            let color = if t >= 0.0 { RGBColor(255, fade, fade) } else { RGBColor(fade, fade, 255) };
            Rectangle::new([(j, n - 1 - i), (j + 1, n - i)], color.filled())
        }))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}
