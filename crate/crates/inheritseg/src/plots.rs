//! SVG figures: per-step loss curves and grouped per-class Dice bars.

use std::path::Path;

use inheritseg_core::losses::LossBundle;
use inheritseg_core::metrics::MetricReport;
use inheritseg_core::training::StepRecord;
use plotters::prelude::*;

use crate::error::{HarnessError, Result};

fn plot_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::format(path, format!("plot: {e}"))
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// Six panels, one per loss term, against the step index.
pub fn plot_losses(path: &Path, history: &[StepRecord]) -> Result<()> {
    let root = SVGBackend::new(path, (1200, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let steps = history.len().max(1) as f64;
    for (k, panel) in root.split_evenly((2, 3)).iter().enumerate() {
        let series: Vec<(f64, f64)> = history.iter().map(|r| (r.step as f64, r.losses.values()[k])).collect();
        let (lo, hi) = padded_range(series.iter().map(|p| p.1));
        let mut chart = ChartBuilder::on(panel)
            .caption(LossBundle::NAMES[k], ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(28)
            .y_label_area_size(56)
            .build_cartesian_2d(0.0..steps, lo..hi)
            .map_err(|e| plot_err(path, e))?;
        chart.configure_mesh().x_desc("step").draw().map_err(|e| plot_err(path, e))?;
        chart.draw_series(LineSeries::new(series, &BLUE)).map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// Dice per class, one bar per report within each class group.
pub fn plot_dice_bars(path: &Path, reports: &[&MetricReport]) -> Result<()> {
    let Some(first) = reports.first() else {
        return Err(plot_err(path, "no reports"));
    };
    let classes = first.classes.len();
    let root = SVGBackend::new(path, (220 * classes as u32 + 300, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Dice per class", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .right_y_label_area_size(0)
        .build_cartesian_2d(0.0..classes as f64, 0.0..1.0)
        .map_err(|e| plot_err(path, e))?;
    let names: Vec<String> = first.classes.iter().map(|m| m.name.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(classes * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 && i < names.len() {
                names[i].clone()
            } else {
                String::new()
            }
        })
        .y_desc("Dice")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let width = 0.8 / reports.len() as f64;
    for (j, r) in reports.iter().enumerate() {
        let color = Palette99::pick(j).to_rgba();
        chart
            .draw_series(r.classes.iter().enumerate().map(|(i, m)| {
                let x0 = i as f64 + 0.1 + j as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width * 0.9, m.dice.clamp(0.0, 1.0))], color.filled())
            }))
            .map_err(|e| plot_err(path, e))?
            .label(r.tag.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
