//! SVG figures: a PSNR/SSIM bar chart and a per-epoch loss curve.

use std::path::{Path, PathBuf};

use geolle_core::synth::Split;
use geolle_core::train::MetricsReport;
use plotters::prelude::*;

pub const METRICS_SVG: &str = "metrics.svg";
pub const LOSS_SVG: &str = "loss.svg";

const PALETTE: [RGBColor; 8] = [
    RGBColor(0x1f, 0x77, 0xb4),
    RGBColor(0xff, 0x7f, 0x0e),
    RGBColor(0x2c, 0xa0, 0x2c),
    RGBColor(0xd6, 0x27, 0x28),
    RGBColor(0x94, 0x67, 0xbd),
    RGBColor(0x8c, 0x56, 0x4b),
    RGBColor(0xe3, 0x77, 0xc2),
    RGBColor(0x7f, 0x7f, 0x7f),
];

fn color(i: usize) -> RGBColor {
    PALETTE[i % PALETTE.len()]
}

pub fn label(r: &MetricsReport) -> String {
    let mut s = r.mode.to_string();
    if r.config.lambda_scale != 1.0 {
        s.push_str(&format!(" lx{}", r.config.lambda_scale));
    }
    s.push_str(&format!(" s{}", r.config.seed));
    s
}

type DrawResult<T> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn bar_panel(
    area: &DrawingArea<SVGBackend<'_>, plotters::coord::Shift>,
    title: &str,
    labels: &[String],
    values: &[f64],
) -> DrawResult<()> {
    let n = values.len();
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let top = finite.clone().fold(f64::NEG_INFINITY, f64::max);
    let bottom = finite.fold(f64::INFINITY, f64::min).min(0.0);
    let top = if top.is_finite() && top > bottom {
        top * 1.1
    } else {
        bottom + 1.0
    };
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d((0..n).into_segmented(), bottom..top)
        .map_err(err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n.max(1))
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .draw()
        .map_err(err)?;
    chart
        .draw_series(
            values
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, &v)| {
                    let mut bar = Rectangle::new(
                        [
                            (SegmentValue::Exact(i), 0.0),
                            (SegmentValue::Exact(i + 1), v),
                        ],
                        color(i).filled(),
                    );
                    bar.set_margin(0, 0, 8, 8);
                    bar
                }),
        )
        .map_err(err)?;
    Ok(())
}

/// Test-split PSNR and SSIM per report, side by side.
pub fn metrics_chart(reports: &[(String, MetricsReport)], path: &Path) -> DrawResult<()> {
    let labels: Vec<String> = reports.iter().map(|r| r.0.clone()).collect();
    let test = |r: &MetricsReport| r.split(Split::Test).cloned();
    let psnr: Vec<f64> = reports
        .iter()
        .map(|r| test(&r.1).and_then(|m| m.psnr_mean).unwrap_or(f64::NAN))
        .collect();
    let ssim: Vec<f64> = reports
        .iter()
        .map(|r| test(&r.1).and_then(|m| m.ssim_mean).unwrap_or(f64::NAN))
        .collect();
    let width = 320 + 120 * reports.len() as u32;
    let root = SVGBackend::new(path, (width * 2, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let (left, right) = root.split_horizontally(width);
    bar_panel(&left, "test PSNR (dB)", &labels, &psnr)?;
    bar_panel(&right, "test SSIM", &labels, &ssim)?;
    root.present().map_err(err)
}

/// Mean total training loss per epoch, one line per report.
pub fn loss_chart(reports: &[(String, MetricsReport)], path: &Path) -> DrawResult<()> {
    let epochs = reports
        .iter()
        .map(|r| r.1.epochs.len())
        .max()
        .unwrap_or(0)
        .max(1);
    let values = reports
        .iter()
        .flat_map(|r| r.1.epochs.iter().map(|e| e.total))
        .filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (0.0, 1.0)
    };
    let pad = (hi - lo) * 0.05;
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..(epochs.max(2) - 1) as f64, (lo - pad)..(hi + pad))
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("L = Lg + lambda Ld")
        .draw()
        .map_err(err)?;
    for (i, (name, r)) in reports.iter().enumerate() {
        let c = color(i);
        chart
            .draw_series(LineSeries::new(
                r.epochs.iter().map(|e| (e.epoch as f64, e.total)),
                c.stroke_width(2),
            ))
            .map_err(err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}

pub fn write_all(reports: &[(String, MetricsReport)], out_dir: &Path) -> DrawResult<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(err)?;
    let m = out_dir.join(METRICS_SVG);
    let l = out_dir.join(LOSS_SVG);
    metrics_chart(reports, &m)?;
    loss_chart(reports, &l)?;
    Ok(vec![m, l])
}
