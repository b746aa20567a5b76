//! Self-contained SVG line plots.
//!
//! Each figure embeds its data as CSV inside an XML comment so the picture
//! can be checked against the numbers it shows. Output depends only on the
//! input series.

use std::fmt::Write;

use crate::report::fmt_g17;
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Horizontal reference line.
    pub reference: Option<f64>,
    /// Upper limit of the y axis; larger values are clipped at the frame.
    pub y_cap: Option<f64>,
}

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Round-ish tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-300);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|k| k as f64 * step).collect()
}

fn short(x: f64) -> String {
    let s = format!("{:.4}", x);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

pub fn render(fig: &Figure) -> Result<String, CliError> {
    let pts: Vec<(f64, f64)> = fig
        .series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(CliError::Runtime(format!("plot '{}' has no data", fig.title)));
    }
    let cap = |y: f64| fig.y_cap.map_or(y, |c| y.min(c));
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(cap(y));
        y1 = y1.max(cap(y));
    }
    if let Some(r) = fig.reference {
        y0 = y0.min(r);
        y1 = y1.max(r);
    }
    if x1 - x0 <= 0.0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = if y1 - y0 <= 0.0 { 0.5 } else { 0.05 * (y1 - y0) };
    y0 -= pad;
    y1 += pad;
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (cap(y) - y0) / (y1 - y0)) * ph;

    let mut o = String::new();
    let _ = writeln!(o, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    o.push_str("<!-- data\nseries,x,y\n");
    for s in &fig.series {
        for &(x, y) in &s.points {
            let _ = writeln!(o, "{},{},{}", s.name.replace("--", "- -"), fmt_g17(x), fmt_g17(y));
        }
    }
    o.push_str("-->\n");
    let _ = writeln!(o, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(o, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(&fig.title));
    let _ = writeln!(o, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for t in ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(o, r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#888"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"##, TOP + ph, TOP + ph + 5.0, TOP + ph + 18.0, short(t));
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(o, r##"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#888"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##, LEFT - 5.0, LEFT - 8.0, y + 4.0, short(t));
    }
    let _ = writeln!(o, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 12.0, esc(&fig.x_label));
    let _ = writeln!(o, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#, TOP + ph / 2.0, TOP + ph / 2.0, esc(&fig.y_label));
    if let Some(r) = fig.reference {
        let y = sy(r);
        let _ = writeln!(o, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#444" stroke-dasharray="6 4"/>"##, LEFT + pw);
    }
    for (k, s) in fig.series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let good: Vec<(f64, f64)> = s.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        if good.len() == 1 {
            let (x, y) = good[0];
            let _ = writeln!(o, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, sx(x), sy(y));
        } else if good.len() > 1 {
            let path: Vec<String> = good.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(o, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        }
        let ly = TOP + 14.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(o, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#, lx + 20.0, lx + 26.0, ly + 4.0, esc(&s.name));
    }
    o.push_str("</svg>\n");
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig(series: Vec<Series>) -> Figure {
        Figure {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series,
            reference: Some(1.0),
            y_cap: None,
        }
    }

    #[test]
    fn empty_plot_is_an_error() {
        assert!(render(&fig(vec![])).is_err());
        assert!(render(&fig(vec![Series { name: "a".into(), points: vec![] }])).is_err());
    }

    #[test]
    fn single_point_renders_one_marker() {
        let s = render(&fig(vec![Series { name: "a".into(), points: vec![(0.5, 0.9)] }])).unwrap();
        assert!(s.starts_with("<svg"));
        assert!(s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<circle").count(), 1);
        assert_eq!(s.matches("<polyline").count(), 0);
        assert!(s.contains("a,0.5,0.90000000000000002"));
    }

    #[test]
    fn output_is_deterministic() {
        let f = fig(vec![
            Series { name: "a<b".into(), points: vec![(0.0, 0.5), (1.0, 1.2), (2.0, 1.0)] },
            Series { name: "c".into(), points: vec![(0.0, 1.0), (2.0, 1.0)] },
        ]);
        let a = render(&f).unwrap();
        assert_eq!(a, render(&f).unwrap());
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("a&lt;b"));
        assert!(a.contains("stroke-dasharray"));
    }

    #[test]
    fn tick_values_are_round() {
        assert_eq!(ticks(0.0, 1.0), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert!(ticks(0.93, 1.13).len() >= 3);
    }
}
