//! Result emission: the aggregate CSV table and an SVG line chart.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One aggregated point of a simulatability curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub strategy: String,
    pub p: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub runs: u32,
}

pub fn curves_to_csv(curves: &[CurvePoint]) -> String {
    let mut out = String::from("strategy,p,mean_acc,std_acc,runs\n");
    for c in curves {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.strategy, c.p, c.mean_acc, c.std_acc, c.runs
        ));
    }
    out
}

pub fn curves_from_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("strategy,p,mean_acc,std_acc,runs") => {}
        other => {
            return Err(Error::Format(format!(
                "unexpected results header: {other:?}"
            )))
        }
    }
    let mut curves = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!("bad results row: {line}")));
        }
        curves.push(CurvePoint {
            strategy: fields[0].to_string(),
            p: fields[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad p in row: {line}")))?,
            mean_acc: fields[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad mean in row: {line}")))?,
            std_acc: fields[3]
                .parse()
                .map_err(|_| Error::Format(format!("bad std in row: {line}")))?,
            runs: fields[4]
                .parse()
                .map_err(|_| Error::Format(format!("bad runs in row: {line}")))?,
        });
    }
    Ok(curves)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 55.0;

/// Render one polyline per strategy over the budget grid. Accuracy spans
/// the full [0, 1] axis; x positions follow the p values in percent.
pub fn curves_to_svg(curves: &[CurvePoint]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::InvalidInput("no curves to draw".into()));
    }
    let mut strategies: Vec<String> = curves.iter().map(|c| c.strategy.clone()).collect();
    strategies.sort();
    strategies.dedup();

    let p_min = curves.iter().map(|c| c.p).fold(f64::INFINITY, f64::min);
    let p_max = curves.iter().map(|c| c.p).fold(f64::NEG_INFINITY, f64::max);
    let span = if p_max > p_min { p_max - p_min } else { 1.0 };
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_of = |p: f64| MARGIN_L + (p - p_min) / span * plot_w;
    let y_of = |acc: f64| MARGIN_T + (1.0 - acc) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n",
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        y_of(0.0),
        MARGIN_L + plot_w,
        y_of(0.0)
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        y_of(0.0),
        MARGIN_L,
        y_of(1.0)
    ));
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            MARGIN_L - 4.0,
            y_of(tick),
            MARGIN_L,
            y_of(tick)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{:.2}</text>\n",
            MARGIN_L - 7.0,
            y_of(tick) + 4.0,
            tick
        ));
    }
    let mut ticks: Vec<f64> = curves.iter().map(|c| c.p).collect();
    ticks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ticks.dedup();
    for &p in &ticks {
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            x_of(p),
            y_of(0.0),
            x_of(p),
            y_of(0.0) + 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            x_of(p),
            y_of(0.0) + 18.0,
            format_percent(p)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">p%</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">accuracy</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));

    // One polyline per strategy; points sorted by p.
    for (si, strategy) in strategies.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut points: Vec<&CurvePoint> =
            curves.iter().filter(|c| &c.strategy == strategy).collect();
        points.sort_by(|a, b| a.p.partial_cmp(&b.p).unwrap());
        let coords: Vec<String> = points
            .iter()
            .map(|c| format!("{:.2},{:.2}", x_of(c.p), y_of(c.mean_acc)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
            color,
            coords.join(" ")
        ));
        for c in &points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{}\"/>\n",
                x_of(c.p),
                y_of(c.mean_acc),
                color
            ));
        }
        // Legend.
        let ly = MARGIN_T + 14.0 + 18.0 * si as f64;
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_R + 12.0,
            ly,
            WIDTH - MARGIN_R + 36.0,
            ly,
            color
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{}</text>\n",
            WIDTH - MARGIN_R + 42.0,
            ly + 4.0,
            strategy
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn format_percent(p: f64) -> String {
    let pct = p * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct:.1}")
    }
}

/// Write `results.csv` and `curves.svg` into `out_dir`.
pub fn emit_report(curves: &[CurvePoint], out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if curves.is_empty() {
        return Err(Error::InvalidInput("no curves to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("results.csv");
    let svg_path = out_dir.join("curves.svg");
    fs::write(&csv_path, curves_to_csv(curves))?;
    fs::write(&svg_path, curves_to_svg(curves)?)?;
    Ok((csv_path, svg_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_curves() -> Vec<CurvePoint> {
        let mut out = Vec::new();
        for strategy in ["hypercorrection", "random"] {
            for (i, p) in [0.1, 0.2, 0.3].iter().enumerate() {
                out.push(CurvePoint {
                    strategy: strategy.to_string(),
                    p: *p,
                    mean_acc: 0.5 + 0.1 * i as f64 + 1.0 / 3.0 * 1e-3,
                    std_acc: 0.01,
                    runs: 5,
                });
            }
        }
        out
    }

    #[test]
    fn csv_row_count_and_round_trip() {
        let curves = sample_curves();
        let csv = curves_to_csv(&curves);
        assert_eq!(csv.lines().count(), 1 + curves.len());
        let parsed = curves_from_csv(&csv).unwrap();
        assert_eq!(parsed.len(), curves.len());
        for (a, b) in curves.iter().zip(&parsed) {
            assert_eq!(a.strategy, b.strategy);
            // Exact numeric round trip through the shortest decimal form.
            assert_eq!(a.p.to_bits(), b.p.to_bits());
            assert_eq!(a.mean_acc.to_bits(), b.mean_acc.to_bits());
            assert_eq!(a.std_acc.to_bits(), b.std_acc.to_bits());
            assert_eq!(a.runs, b.runs);
        }
    }

    #[test]
    fn svg_has_one_polyline_per_strategy() {
        let curves = sample_curves();
        let svg = curves_to_svg(&curves).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">p%<"));
        assert!(svg.contains("accuracy"));
    }

    #[test]
    fn emit_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, svg) = emit_report(&sample_curves(), dir.path()).unwrap();
        assert!(csv.exists());
        assert!(svg.exists());
        assert!(emit_report(&[], dir.path()).is_err());
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let curves = sample_curves();
        let err = emit_report(&curves, Path::new("/proc/nonexistent/subdir")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn rejects_malformed_csv() {
        assert!(curves_from_csv("bad header\n").is_err());
        assert!(curves_from_csv("strategy,p,mean_acc,std_acc,runs\na,b\n").is_err());
        assert!(curves_from_csv("strategy,p,mean_acc,std_acc,runs\na,x,0.5,0.1,5\n").is_err());
    }
}
