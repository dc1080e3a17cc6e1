//! Static SVG line charts rendered from report CSVs.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::bail;

use crate::bench::{read_bench_csv, Matcher};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 64.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn axis(v: f64, log: bool) -> f64 {
    if log {
        v.log10()
    } else {
        v
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Chart {
    pub fn render(&self) -> anyhow::Result<String> {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|&(x, y)| (axis(x, self.log_x), axis(y, self.log_y))))
            .collect();
        if pts.is_empty() || pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            bail!("chart needs finite points (positive values on log axes)");
        }
        let span = |f: fn(&(f64, f64)) -> f64| {
            let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (x0, x1) = span(|p| p.0);
        let (y0, y1) = span(|p| p.1);
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
        let mut svg = String::new();
        writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
        )?;
        writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
        writeln!(
            svg,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        )?;
        let (bx, by) = (MARGIN, HEIGHT - MARGIN);
        writeln!(svg, r#"<path d="M{bx},{MARGIN} V{by} H{}" stroke="black" fill="none"/>"#, WIDTH - MARGIN)?;
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            let unlog = |v: f64, log: bool| if log { 10f64.powf(v) } else { v };
            writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(xv),
                by + 18.0,
                fmt_tick(unlog(xv, self.log_x))
            )?;
            writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                bx - 6.0,
                sy(yv) + 4.0,
                fmt_tick(unlog(yv, self.log_y))
            )?;
        }
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        )?;
        writeln!(
            svg,
            r#"<text transform="translate(16,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
            HEIGHT / 2.0,
            escape(&self.y_label)
        )?;
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.1},{:.1}", sx(axis(x, self.log_x)), sy(axis(y, self.log_y))))
                .collect();
            writeln!(svg, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, path.join(" "))?;
            for p in &path {
                let (cx, cy) = p.split_once(',').unwrap();
                writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#)?;
            }
            let ly = MARGIN + 8.0 + 18.0 * i as f64;
            writeln!(svg, r#"<rect x="{}" y="{}" width="12" height="3" fill="{color}"/>"#, bx + 12.0, ly - 4.0)?;
            writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, bx + 30.0, ly, escape(&s.name))?;
        }
        svg.push_str("</svg>\n");
        Ok(svg)
    }
}

/// Time against codebook size, one log-log line per matcher.
pub fn bench_chart(csv: &Path) -> anyhow::Result<Chart> {
    let rows = read_bench_csv(csv)?;
    let series = Matcher::ALL
        .iter()
        .filter_map(|&m| {
            let pts: Vec<(f64, f64)> =
                rows.iter().filter(|r| r.matcher == m).map(|r| (r.codebook_size as f64, r.median_seconds)).collect();
            let slope = rows.iter().find(|r| r.matcher == m)?.slope;
            Some(Series { name: format!("{} (slope {slope:.2})", m.name()), points: pts })
        })
        .collect();
    Ok(Chart {
        title: "Matching time vs codebook size".into(),
        x_label: "codebook size K".into(),
        y_label: "median seconds per grid".into(),
        log_x: true,
        log_y: true,
        series,
    })
}

/// Hit rate against candidate count from a `k,hits,total,rate` CSV.
pub fn hit_rate_chart(csv: &Path) -> anyhow::Result<Chart> {
    let mut r = csv::Reader::from_path(csv)?;
    let mut pts = Vec::new();
    for rec in r.deserialize::<(usize, u64, u64, f64)>() {
        let (k, _, _, rate) = rec?;
        pts.push((k as f64, rate));
    }
    Ok(Chart {
        title: "Top-k hit rate".into(),
        x_label: "k".into(),
        y_label: "hit rate".into(),
        log_x: false,
        log_y: false,
        series: vec![Series { name: "LQ latents vs HQ codes".into(), points: pts }],
    })
}

/// Chooses the chart from the CSV header.
pub fn chart_for(csv: &Path) -> anyhow::Result<Chart> {
    let header = std::fs::read_to_string(csv)?.lines().next().unwrap_or_default().to_string();
    match header.as_str() {
        "matcher,K,median_seconds,slope" => bench_chart(csv),
        "k,hits,total,rate" => hit_rate_chart(csv),
        other => bail!("no chart for CSV header {other:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_well_formed_svg() {
        let chart = Chart {
            title: "a < b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_x: true,
            log_y: false,
            series: vec![Series { name: "s".into(), points: vec![(1.0, 2.0), (10.0, 3.0)] }],
        };
        let svg = chart.render().unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a &lt; b"));
        let bad = Chart { series: vec![Series { name: "s".into(), points: vec![(0.0, 1.0)] }], ..chart };
        assert!(bad.render().is_err());
    }
}
