//! Loss and mAP curves as PNG line charts. Charts carry no text; series
//! colors are fixed (see [`LOSS_SERIES`]).

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::train::MetricsRecord;
use crate::error::{Error, Result};

pub const LOSS_PLOT: &str = "loss.png";
pub const MAP_PLOT: &str = "map.png";
const SIZE: (u32, u32) = (800, 480);

/// Loss series drawn in the loss chart, with their colors.
pub const LOSS_SERIES: [(&str, RGBColor); 5] = [
    ("total", BLACK),
    ("l_det", RGBColor(0x1f, 0x77, 0xb4)),
    ("l_uda", RGBColor(0x2c, 0xa0, 0x2c)),
    ("l_rp", RGBColor(0xd6, 0x27, 0x28)),
    ("l_cl", RGBColor(0x94, 0x67, 0xbd)),
];

fn value(r: &MetricsRecord, series: &str) -> f64 {
    match series {
        "total" => r.total,
        "l_det" => r.l_det,
        "l_uda" => r.l_uda,
        "l_rp" => r.l_rp,
        "l_cl" => r.l_cl,
        _ => unreachable!("unknown series {series}"),
    }
}

/// Moving average over a trailing window, to make per-step losses legible.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut sum = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            sum += v;
            if i >= window {
                sum -= values[i - window];
            }
            sum / (i + 1).min(window) as f64
        })
        .collect()
}

fn line_chart(path: &Path, x_max: f64, y_max: f64, series: &[(Vec<(f64, f64)>, RGBColor)]) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(format!("{}: {e}", path.display()));
    // drawn in memory and encoded by `image`, which also works off-filesystem targets
    let mut rgb = vec![0u8; (SIZE.0 * SIZE.1 * 3) as usize];
    let root = BitMapBackend::with_buffer(&mut rgb, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(0.0..x_max.max(1.0), 0.0..y_max.max(1e-9))
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_labels(0)
        .y_labels(0)
        .light_line_style(RGBColor(0xee, 0xee, 0xee))
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (points, color) in series {
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))?;
    drop(chart);
    drop(root);
    image::save_buffer(path, &rgb, SIZE.0, SIZE.1, image::ColorType::Rgb8).map_err(|e| plot_err(&e))
}

/// Writes `loss.png` and `map.png` under `out_dir`.
pub fn plot_metrics(metrics: &[MetricsRecord], out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let x_max = metrics.last().map_or(1.0, |r| r.step as f64);
    let window = (metrics.len() / 50).max(1);

    let mut y_max: f64 = 0.0;
    let loss_series: Vec<_> = LOSS_SERIES
        .iter()
        .map(|&(name, color)| {
            let raw: Vec<f64> = metrics.iter().map(|r| value(r, name)).collect();
            let smoothed = smooth(&raw, window);
            y_max = smoothed.iter().copied().fold(y_max, f64::max);
            (metrics.iter().zip(smoothed).map(|(r, v)| (r.step as f64, v)).collect(), color)
        })
        .collect();
    let loss_path = out_dir.join(LOSS_PLOT);
    line_chart(&loss_path, x_max, y_max * 1.05, &loss_series)?;

    let map_points: Vec<(f64, f64)> =
        metrics.iter().filter_map(|r| r.target_map.map(|m| (r.step as f64, m))).collect();
    let map_path = out_dir.join(MAP_PLOT);
    line_chart(&map_path, x_max, 1.0, &[(map_points, RGBColor(0x1f, 0x77, 0xb4))])?;
    Ok((loss_path, map_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
        assert_eq!(smooth(&[2.0], 10), vec![2.0]);
    }
}
