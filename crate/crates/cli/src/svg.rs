//! Static SVG line charts of metrics columns.

use std::fmt::Write as _;
use std::path::Path;

use fbo_core::{MetricsRecord, RunReport};

use crate::error::{CliError, CliResult};

pub const LOG_FLOOR: f64 = 1e-16;
pub const METRICS: [&str; 5] = ["grad_norm_sq", "lower_gap", "est_err", "objective", "test_metric"];

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XAxis {
    Rounds,
    Iteration,
}

impl XAxis {
    fn label(self) -> &'static str {
        match self {
            XAxis::Rounds => "rounds_cum",
            XAxis::Iteration => "k",
        }
    }

    fn value(self, row: &MetricsRecord) -> f64 {
        match self {
            XAxis::Rounds => row.rounds_cum as f64,
            XAxis::Iteration => row.k as f64,
        }
    }
}

pub fn metric_value(row: &MetricsRecord, metric: &str) -> CliResult<Option<f64>> {
    Ok(match metric {
        "grad_norm_sq" => Some(row.grad_norm_sq),
        "lower_gap" => Some(row.lower_gap),
        "est_err" => row.est_err,
        "objective" => Some(row.objective),
        "test_metric" => row.test_metric,
        other => {
            return Err(CliError::Config(format!(
                "unknown metric `{other}` (expected one of {})",
                METRICS.join(", ")
            )))
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub svg: String,
    pub warnings: Vec<String>,
}

/// One polyline per `(label, report)`, drawn against `x_axis`.
pub fn render_svg(series: &[(String, &RunReport)], x_axis: XAxis, metric: &str, log_y: bool) -> CliResult<Chart> {
    if series.is_empty() {
        return Err(CliError::Config("nothing to plot".into()));
    }
    let mut warnings = Vec::new();
    let mut lines: Vec<Vec<(f64, f64)>> = Vec::with_capacity(series.len());
    for (label, report) in series {
        let mut pts = Vec::new();
        for row in &report.rows {
            let Some(mut v) = metric_value(row, metric)? else { continue };
            if log_y && v < LOG_FLOOR {
                warnings.push(format!(
                    "{label}: {metric} = {v:e} at k = {} clamped to {LOG_FLOOR:e} for the log scale",
                    row.k
                ));
                v = LOG_FLOOR;
            }
            pts.push((x_axis.value(row), if log_y { v.log10() } else { v }));
        }
        if pts.is_empty() {
            return Err(CliError::Config(format!("`{label}` has no `{metric}` values")));
        }
        lines.push(pts);
    }

    let all = lines.iter().flatten();
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| TOP + (y_hi - y) / (y_hi - y_lo) * plot_h;
    let tick = |v: f64| if log_y { format!("1e{v:.1}") } else { format!("{v:.3e}") };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for frac in [0.0, 0.5, 1.0] {
        let xv = x_lo + frac * (x_hi - x_lo);
        let yv = y_lo + frac * (y_hi - y_lo);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(xv),
            TOP + plot_h + 18.0,
            xv
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        x_axis.label()
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{metric}{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        if log_y { " (log10)" } else { "" }
    );
    for (idx, pts) in lines.iter().enumerate() {
        let color = COLORS[idx % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
    }
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (idx, (label, _)) in series.iter().enumerate() {
        let color = COLORS[idx % COLORS.len()];
        let y = TOP + 10.0 + 18.0 * idx as f64;
        let x = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            x + 20.0,
            x + 26.0,
            y + 4.0,
            escape(label)
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(Chart { svg: s, warnings })
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_svg(chart: &Chart, path: &Path) -> CliResult<()> {
    std::fs::write(path, &chart.svg).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fbo_core::{CommLedger, EstimatorKind, Vector};

    fn report(values: &[f64]) -> RunReport {
        RunReport {
            estimator: EstimatorKind::Aggitd,
            rows: values
                .iter()
                .enumerate()
                .map(|(k, &v)| MetricsRecord {
                    k,
                    rounds_cum: 5 * k as u64,
                    grad_norm_sq: v,
                    lower_gap: 1.0,
                    est_err: None,
                    objective: 0.0,
                    test_metric: None,
                })
                .collect(),
            x_final: Vector::zeros(1),
            y_final: Vector::zeros(1),
            ledger: CommLedger::new(),
            rounds_per_outer: Vec::new(),
            loops_per_outer: Vec::new(),
            samples_drawn: 0,
        }
    }

    fn vertices(svg: &str) -> Vec<usize> {
        svg.lines()
            .filter(|l| l.starts_with("<polyline"))
            .map(|l| {
                let pts = l.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
                pts.split(' ').count()
            })
            .collect()
    }

    #[test]
    fn single_report_single_polyline() {
        let r = report(&[3.0, 2.0, 1.0]);
        let chart = render_svg(&[("aggitd".into(), &r)], XAxis::Rounds, "grad_norm_sq", false).unwrap();
        assert_eq!(vertices(&chart.svg), vec![3]);
        assert!(chart.warnings.is_empty());
        assert!(chart.svg.starts_with("<svg") && chart.svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn two_reports_two_lines_and_legend_entries() {
        let (a, b) = (report(&[3.0, 2.0]), report(&[4.0, 1.0, 0.5]));
        let chart = render_svg(&[("aggitd".into(), &a), ("aid".into(), &b)], XAxis::Iteration, "grad_norm_sq", true).unwrap();
        assert_eq!(vertices(&chart.svg), vec![2, 3]);
        let legend = chart.svg.split("<g class=\"legend\">").nth(1).unwrap();
        assert_eq!(legend.matches("<text").count(), 2);
    }

    #[test]
    fn log_scale_clamps_zero_with_warning() {
        let r = report(&[1.0, 0.0]);
        let chart = render_svg(&[("run".into(), &r)], XAxis::Rounds, "grad_norm_sq", true).unwrap();
        assert_eq!(chart.warnings.len(), 1);
        assert!(chart.warnings[0].contains("1e-16"));
        assert_eq!(vertices(&chart.svg), vec![2]);
    }

    #[test]
    fn unknown_or_missing_metric_is_an_error() {
        let r = report(&[1.0]);
        assert!(render_svg(&[("run".into(), &r)], XAxis::Rounds, "accuracy", false).is_err());
        assert!(render_svg(&[("run".into(), &r)], XAxis::Rounds, "test_metric", false).is_err());
        assert!(render_svg(&[], XAxis::Rounds, "grad_norm_sq", false).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let r = report(&[1.0, 2.0]);
        let chart = render_svg(&[("a<b".into(), &r)], XAxis::Rounds, "lower_gap", false).unwrap();
        assert!(chart.svg.contains("a&lt;b"));
    }
}
