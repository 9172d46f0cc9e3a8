//! Static PNG plots via plotters. Fonts are registered at runtime from the
//! usual system locations; when none is found the charts are still drawn,
//! just without text.

use plotters::prelude::*;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};

static FONT_OK: OnceLock<bool> = OnceLock::new();

const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/local/share/fonts/DejaVuSans.ttf",
];

fn fonts_available() -> bool {
    *FONT_OK.get_or_init(|| {
        for path in FONT_CANDIDATES {
            if let Ok(bytes) = std::fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Plot(format!("{e:?}"))
}

const SERIES_COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Draws one or more line series on a shared axis.
pub fn line_chart(
    path: &Path,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let with_text = fonts_available();
    let root = BitMapBackend::new(path, (960, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;

    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in series {
        for &(x, y) in pts {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let pad = (y_max - y_min) * 0.05;

    let mut builder = ChartBuilder::on(&root);
    builder.margin(12).x_label_area_size(36).y_label_area_size(56);
    if with_text {
        builder.caption(title, ("sans-serif", 22));
    }
    let mut chart = builder
        .build_cartesian_2d(x_min..x_max.max(x_min + 1.0), (y_min - pad)..(y_max + pad))
        .map_err(plot_err)?;
    if with_text {
        chart.configure_mesh().draw().map_err(plot_err)?;
    } else {
        chart
            .configure_mesh()
            .disable_x_axis()
            .disable_y_axis()
            .draw()
            .map_err(plot_err)?;
    }
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), &color))
            .map_err(plot_err)?
            .label(label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    if with_text && series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Overlaid value histograms (fixed bin count over the joint range).
pub fn histogram_chart(
    path: &Path,
    title: &str,
    series: &[(String, Vec<f64>)],
    bins: usize,
) -> Result<()> {
    let with_text = fonts_available();
    let root = BitMapBackend::new(path, (960, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, vals) in series {
        for &v in vals {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if (hi - lo).abs() < 1e-12 {
        hi = lo + 1.0;
    }
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;

    let mut counts: Vec<Vec<usize>> = Vec::new();
    let mut max_count = 1usize;
    for (_, vals) in series {
        let mut c = vec![0usize; bins];
        for &v in vals {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            c[idx] += 1;
        }
        max_count = max_count.max(c.iter().copied().max().unwrap_or(0));
        counts.push(c);
    }

    let mut builder = ChartBuilder::on(&root);
    builder.margin(12).x_label_area_size(36).y_label_area_size(56);
    if with_text {
        builder.caption(title, ("sans-serif", 22));
    }
    let mut chart = builder
        .build_cartesian_2d(lo..hi, 0f64..(max_count as f64 * 1.1))
        .map_err(plot_err)?;
    if with_text {
        chart.configure_mesh().draw().map_err(plot_err)?;
    } else {
        chart
            .configure_mesh()
            .disable_x_axis()
            .disable_y_axis()
            .draw()
            .map_err(plot_err)?;
    }
    for (i, ((label, _), c)) in series.iter().zip(counts.iter()).enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        chart
            .draw_series(c.iter().enumerate().map(|(bi, &n)| {
                let x0 = lo + bi as f64 * width;
                Rectangle::new(
                    [(x0, 0.0), (x0 + width, n as f64)],
                    color.mix(0.45).filled(),
                )
            }))
            .map_err(plot_err)?
            .label(label.clone())
            .legend(move |(x, y)| {
                Rectangle::new([(x, y - 5), (x + 14, y + 5)], color.mix(0.45).filled())
            });
    }
    if with_text && series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_render_to_png() {
        let dir = tempfile::tempdir().unwrap();
        let line = dir.path().join("line.png");
        line_chart(
            &line,
            "loss",
            &[(
                "a".into(),
                (0..50).map(|i| (i as f64, (i as f64 * 0.1).sin())).collect(),
            )],
        )
        .unwrap();
        assert!(line.metadata().unwrap().len() > 1000);

        let hist = dir.path().join("hist.png");
        histogram_chart(
            &hist,
            "scores",
            &[
                ("x".into(), vec![0.1, 0.2, 0.2, 0.3, 0.8]),
                ("y".into(), vec![0.5, 0.6, 0.6, 0.9]),
            ],
            10,
        )
        .unwrap();
        assert!(hist.metadata().unwrap().len() > 1000);
    }
}
