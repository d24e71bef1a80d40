//! CSV emission of run metrics and a dependency-free SVG line chart.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::netsim::{MetricsRow, Strategy};

pub const METRICS_HEADER: &str =
    "iteration,strategy,agent_id,train_loss,test_loss,disagreement,centroid_grad_norm_sq,lambda2,wall_ms";
pub const METATEST_HEADER: &str = "grad_step,strategy,agent_id,test_loss";

/// One line per agent followed by the aggregate line (`agent_id = -1`).
pub fn metrics_lines(row: &MetricsRow) -> Vec<String> {
    let s = row.strategy.name();
    let mut out = Vec::with_capacity(row.train_loss.len() + 1);
    for (k, ((train, test), dis)) in row
        .train_loss
        .iter()
        .zip(&row.test_loss)
        .zip(&row.agent_disagreement)
        .enumerate()
    {
        out.push(format!(
            "{},{s},{k},{train},{test},{dis},{},{},{}",
            row.iteration, row.centroid_grad_norm_sq, row.lambda2, row.wall_ms
        ));
    }
    let n = row.train_loss.len() as f64;
    let mean_train = row.train_loss.iter().sum::<f64>() / n;
    out.push(format!(
        "{},{s},-1,{mean_train},{},{},{},{},{}",
        row.iteration, row.mean_test_loss, row.disagreement, row.centroid_grad_norm_sq, row.lambda2, row.wall_ms
    ));
    out
}

/// Per-agent meta-test curves plus their mean (`agent_id = -1`).
pub fn metatest_lines(strategy: Strategy, curves: &[Vec<f64>]) -> Vec<String> {
    let mut out = Vec::new();
    let steps = curves.first().map_or(0, Vec::len);
    for step in 0..steps {
        let mut sum = 0.0;
        for (k, c) in curves.iter().enumerate() {
            out.push(format!("{step},{},{k},{}", strategy.name(), c[step]));
            sum += c[step];
        }
        out.push(format!("{step},{},-1,{}", strategy.name(), sum / curves.len() as f64));
    }
    out
}

/// Drops the trailing `wall_ms` field of every data line.
pub fn strip_wall_clock(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A named series of `(x, y)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads the aggregate test-loss series of each strategy from a metrics or
/// meta-test CSV.
pub fn read_series(csv: &str) -> Result<(String, Vec<Series>)> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Config("empty CSV".into()))?.trim();
    let (x_col, y_col, width, x_label) = if header == METRICS_HEADER {
        (0, 4, 9, "iteration")
    } else if header == METATEST_HEADER {
        (0, 3, 4, "gradient steps")
    } else {
        return Err(Error::Config(format!("unrecognised CSV header '{header}'")));
    };
    let mut series: Vec<Series> = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("malformed CSV line {}: '{line}'", i + 2));
        if cells.len() != width {
            return Err(bad());
        }
        let numeric_ok = cells
            .iter()
            .enumerate()
            .all(|(c, v)| c == 1 || v.parse::<f64>().is_ok());
        if !numeric_ok {
            return Err(bad());
        }
        let agent: i64 = cells[2].parse().map_err(|_| bad())?;
        let x: f64 = cells[x_col].parse().map_err(|_| bad())?;
        let y: f64 = cells[y_col].parse().map_err(|_| bad())?;
        if agent != -1 {
            continue;
        }
        let name = cells[1];
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((x, y)),
            None => series.push(Series {
                name: name.to_string(),
                points: vec![(x, y)],
            }),
        }
    }
    Ok((x_label.to_string(), series))
}

const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;

/// Line chart of test loss, one polyline per series.
pub fn render_svg(x_label: &str, series: &[Series]) -> String {
    let finite = series
        .iter()
        .flat_map(|s| &s.points)
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        TOP + ph
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(fx),
            TOP + ph + 16.0,
            tick(fx)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">test loss</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            escape(&s.name)
        );
        let ly = TOP + 16.0 * (i as f64 + 1.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{colour}">{}</text>"#,
            LEFT + pw + 12.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 100.0).round() / 100.0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the SVG for a metrics or meta-test CSV.
pub fn plot_csv(csv: &str) -> Result<String> {
    let (x_label, series) = read_series(csv)?;
    Ok(render_svg(&x_label, &series))
}
