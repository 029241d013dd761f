//! CSV tables and minimal SVG charts.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;

/// Serialize rows to CSV text with a header line.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str, desc: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, "<desc>{}</desc>", escape(desc));
    let _ = writeln!(out, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, y_max: f64, y_label: &str) {
    let plot_h = H - TOP - BOTTOM;
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="#333"/>"##,
        H - BOTTOM
    );
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="#333"/>"##,
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM
    );
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = H - BOTTOM - plot_h * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="#333"/><text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text transform="translate(14 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + plot_h / 2.0,
        escape(y_label)
    );
}

fn nice_max(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0, f64::max);
    if m <= 0.0 {
        1.0
    } else {
        m * 1.1
    }
}

/// Vertical bar chart, one bar per label.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64], y_label: &str, desc: &str) -> String {
    let mut out = String::new();
    header(&mut out, title, desc);
    let y_max = nice_max(values.iter().copied());
    axes(&mut out, y_max, y_label);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let n = labels.len().max(1) as f64;
    let slot = plot_w / n;
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let bh = (v / y_max).clamp(0.0, 1.0) * plot_h;
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{bh:.1}" fill="{}"/>"#,
            H - BOTTOM - bh,
            slot * 0.7,
            PALETTE[i % PALETTE.len()]
        );
        let cx = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#,
            H - BOTTOM - bh - 4.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 16.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Line chart over shared x labels, one polyline per series.
pub fn line_chart_svg(title: &str, x_labels: &[String], series: &[(String, Vec<f64>)], y_label: &str, desc: &str) -> String {
    let mut out = String::new();
    header(&mut out, title, desc);
    let y_max = nice_max(series.iter().flat_map(|(_, v)| v.iter().copied()));
    axes(&mut out, y_max, y_label);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let n = x_labels.len().max(1) as f64;
    let x_at = |i: usize| LEFT + plot_w * (i as f64 + 0.5) / n;
    for (i, label) in x_labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x_at(i),
            H - BOTTOM + 16.0,
            escape(label)
        );
    }
    for (s, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.1},{:.1}", x_at(i), H - BOTTOM - (v / y_max).clamp(0.0, 1.0) * plot_h))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').expect("point");
            let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = H - 24.0 + 0.0 * s as f64;
        let lx = LEFT + 110.0 * s as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 9.0,
            lx + 14.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
