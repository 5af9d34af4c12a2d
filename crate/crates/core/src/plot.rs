//! Static SVG plots: training loss curves and mAP against the shared
//! auxiliary weight.

use std::fs;
use std::path::Path;

use plotters::prelude::*;

use crate::ablate::{Row, Sweep};
use crate::error::{Error, Result};
use crate::trainer::StepRecord;

const SIZE: (u32, u32) = (900, 540);

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e)))
        .collect()
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Total loss and its six parts against the step index.
pub fn plot_loss_curves(records: &[StepRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Validation("report has no steps to plot".into()));
    }
    let series: [(&str, fn(&StepRecord) -> f64, RGBColor); 7] = [
        ("total", |r| r.total, BLACK),
        ("act", |r| r.parts.act, RED),
        ("bkg", |r| r.parts.bkg, BLUE),
        ("contra", |r| r.parts.contra, GREEN),
        ("ac", |r| r.parts.ac, MAGENTA),
        ("aou", |r| r.parts.aou, CYAN),
        ("aru", |r| r.parts.aru, RGBColor(255, 140, 0)),
    ];
    let x_max = records.last().map_or(1, |r| r.step.max(1)) as f64;
    let (y_lo, y_hi) = y_range(records.iter().flat_map(|r| series.iter().map(move |(_, f, _)| f(r))));

    let root = SVGBackend::new(path.as_ref(), SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..x_max, y_lo..y_hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("loss")
        .draw()
        .map_err(plot_err)?;
    for (name, f, color) in series {
        chart
            .draw_series(LineSeries::new(records.iter().map(|r| (r.step as f64, f(r))), color))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Band-averaged mAP of the λ-sweep rows against λ.
pub fn plot_lambda_sweep(rows: &[Row], path: impl AsRef<Path>) -> Result<()> {
    let mut lam: Vec<&Row> = rows.iter().filter(|r| r.sweep == Sweep::Lambda && r.value.is_some()).collect();
    if lam.is_empty() {
        return Err(Error::Validation("results contain no lambda sweep rows".into()));
    }
    lam.sort_by(|a, b| a.value.unwrap().total_cmp(&b.value.unwrap()));
    let bands = [("0.1:0.5", RED), ("0.3:0.7", BLUE), ("0.1:0.7", BLACK)];
    let value = |r: &Row, b: &str| 100.0 * r.map_bands.get(b).copied().unwrap_or(f64::NAN);
    let (y_lo, y_hi) = y_range(lam.iter().flat_map(|r| bands.iter().map(move |(b, _)| value(r, b))));

    let root = SVGBackend::new(path.as_ref(), SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("mAP vs auxiliary weight", ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..1.05f64, y_lo..y_hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("lambda")
        .y_desc("mAP (%)")
        .draw()
        .map_err(plot_err)?;
    for (band, color) in bands {
        let pts: Vec<(f64, f64)> = lam.iter().map(|r| (r.value.unwrap(), value(r, band))).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color))
            .map_err(plot_err)?
            .label(format!("AVG {band}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
