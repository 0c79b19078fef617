use std::path::Path;

use plotters::prelude::*;

use crate::data::Vec2;
use crate::error::{Error, Result};
use crate::training::LogRecord;

/// A labelled polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const SIZE: (u32, u32) = (720, 480);

fn plot_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn bounds(points: impl Iterator<Item = (f64, f64)>) -> ((f64, f64), (f64, f64)) {
    let mut x = (f64::INFINITY, f64::NEG_INFINITY);
    let mut y = x;
    for (a, b) in points {
        x = (x.0.min(a), x.1.max(a));
        y = (y.0.min(b), y.1.max(b));
    }
    let pad = |(lo, hi): (f64, f64)| {
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        let m = ((hi - lo) * 0.05).max(1e-6);
        (lo - m, hi + m)
    };
    (pad(x), pad(y))
}

fn palette(i: usize) -> RGBColor {
    const COLORS: [RGBColor; 6] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
    ];
    COLORS[i % COLORS.len()]
}

fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[MetricSeries]) -> Result<()> {
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, SIZE).into_drawing_area();
        root.fill(&WHITE)?;
        let ((x0, x1), (y0, y1)) = bounds(series.iter().flat_map(|s| s.points.iter().copied()));
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw()?;
        for (i, s) in series.iter().enumerate() {
            let color = palette(i);
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| plot_error(path, e))
}

/// Metric against diffusion step count, one series per scenario.
pub fn plot_metric_vs_k(path: &Path, metric: &str, series: &[MetricSeries]) -> Result<()> {
    line_chart(path, &format!("{metric} vs diffusion steps"), "K", metric, series)
}

/// Epoch-mean loss components.
pub fn plot_loss_curve(path: &Path, records: &[LogRecord]) -> Result<()> {
    let pick = |f: fn(&LogRecord) -> f64| records.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>();
    let series = vec![
        MetricSeries { label: "l_total".into(), points: pick(|r| r.l_total) },
        MetricSeries { label: "l_simple".into(), points: pick(|r| r.l_simple) },
    ];
    line_chart(path, "training loss", "epoch", "loss", &series)
}

/// Intermediate sampling states overlaid on the history and ground truth.
pub fn plot_trace(path: &Path, history: &[Vec2], truth: &[Vec2], steps: &[(usize, Vec<Vec2>)]) -> Result<()> {
    let to_pts = |v: &[Vec2]| v.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>();
    let mut series = vec![
        MetricSeries { label: "history".into(), points: to_pts(history) },
        MetricSeries { label: "ground truth".into(), points: to_pts(truth) },
    ];
    series.extend(steps.iter().map(|(k, p)| MetricSeries { label: format!("k = {k}"), points: to_pts(p) }));
    line_chart(path, "sampling trace", "x (m)", "y (m)", &series)
}
