//! Sweep plots as self-contained SVG: mean completion time against the total
//! arrival rate, one polyline per policy. Cells whose backlog slope exceeds
//! the divergence threshold are drawn as crosses pinned to the top edge
//! instead of completion-time points, since their means are meaningless.

use std::fmt::Write as _;

use crate::error::Error;
use crate::report::ResultRow;
use crate::sim::mean_and_std;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 520.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 620.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 470.0;
const DIVERGENCE_SLOPE: f64 = 0.01;

const PALETTE: [&str; 7] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

struct Cell {
    lambda: f64,
    mean: Option<f64>,
    diverging: bool,
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Renders parsed sweep results. Fails on input with no data rows.
pub fn render_plot(rows: &[ResultRow]) -> Result<String, Error> {
    if rows.is_empty() {
        return Err(Error::config("no data rows to plot"));
    }
    let mut policies: Vec<String> = Vec::new();
    for r in rows {
        if !policies.contains(&r.policy) {
            policies.push(r.policy.clone());
        }
    }

    // Collapse replications into one cell per (policy, lambda).
    let mut series: Vec<(String, Vec<Cell>)> = Vec::new();
    for policy in &policies {
        let mut lambdas: Vec<f64> = Vec::new();
        for r in rows.iter().filter(|r| &r.policy == policy) {
            if !lambdas.contains(&r.lambda) {
                lambdas.push(r.lambda);
            }
        }
        lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cells = lambdas
            .iter()
            .map(|&lambda| {
                let group: Vec<&ResultRow> = rows
                    .iter()
                    .filter(|r| &r.policy == policy && r.lambda == lambda)
                    .collect();
                let slopes: Vec<f64> = group.iter().map(|r| r.backlog_slope).collect();
                let means: Vec<f64> =
                    group.iter().filter_map(|r| r.mean_completion_time).collect();
                let diverging = mean_and_std(&slopes).0 > DIVERGENCE_SLOPE || means.is_empty();
                let mean = (!means.is_empty()).then(|| mean_and_std(&means).0);
                Cell { lambda, mean, diverging }
            })
            .collect();
        series.push((policy.clone(), cells));
    }

    let xs: Vec<f64> = series.iter().flat_map(|(_, c)| c.iter().map(|c| c.lambda)).collect();
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let y_max = series
        .iter()
        .flat_map(|(_, c)| c.iter())
        .filter(|c| !c.diverging)
        .filter_map(|c| c.mean)
        .fold(1.0_f64, f64::max)
        * 1.05;

    let x_pos = |v: f64| LEFT + (v - x_min) / x_span * (RIGHT - LEFT);
    let y_pos = |v: f64| BOTTOM - (v / y_max) * (BOTTOM - TOP);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{BOTTOM}" x2="{RIGHT}" y2="{BOTTOM}" stroke="black"/>"#
    )
    .unwrap();
    writeln!(svg, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{BOTTOM}" stroke="black"/>"#)
        .unwrap();

    for k in 0..=5 {
        let frac = k as f64 / 5.0;
        let xv = x_min + frac * x_span;
        let x = x_pos(xv);
        writeln!(
            svg,
            r#"<line x1="{x}" y1="{BOTTOM}" x2="{x}" y2="{}" stroke="black"/>"#,
            BOTTOM + 5.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{x}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
            BOTTOM + 20.0,
            tick_label(xv)
        )
        .unwrap();
        let yv = frac * y_max;
        let y = y_pos(yv);
        writeln!(
            svg,
            r#"<line x1="{}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/>"#,
            LEFT - 5.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="end">{}</text>"#,
            LEFT - 8.0,
            y + 4.0,
            tick_label(yv)
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">total arrival rate</text>"#,
        (LEFT + RIGHT) / 2.0,
        BOTTOM + 40.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="18" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 18 {})">mean completion time (slots)</text>"#,
        (TOP + BOTTOM) / 2.0,
        (TOP + BOTTOM) / 2.0
    )
    .unwrap();

    for (k, (policy, cells)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = cells
            .iter()
            .filter(|c| !c.diverging)
            .filter_map(|c| c.mean.map(|m| format!("{:.2},{:.2}", x_pos(c.lambda), y_pos(m))))
            .collect();
        if points.len() >= 2 {
            writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                points.join(" ")
            )
            .unwrap();
        }
        for c in cells {
            let x = x_pos(c.lambda);
            if c.diverging {
                // Diverging cell: cross pinned to the top edge.
                let y = TOP + 10.0;
                writeln!(
                    svg,
                    r#"<path d="M {} {} L {} {} M {} {} L {} {}" stroke="{color}" stroke-width="2" class="diverging"/>"#,
                    x - 5.0,
                    y - 5.0,
                    x + 5.0,
                    y + 5.0,
                    x - 5.0,
                    y + 5.0,
                    x + 5.0,
                    y - 5.0
                )
                .unwrap();
            } else if let Some(m) = c.mean {
                writeln!(
                    svg,
                    r#"<circle cx="{x:.2}" cy="{:.2}" r="4" fill="{color}"/>"#,
                    y_pos(m)
                )
                .unwrap();
            }
        }
        let ly = TOP + 20.0 * k as f64 + 10.0;
        writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            RIGHT + 15.0,
            RIGHT + 45.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12">{policy}</text>"#,
            RIGHT + 50.0,
            ly + 4.0
        )
        .unwrap();
    }
    writeln!(svg, "</svg>").unwrap();
    Ok(svg)
}
