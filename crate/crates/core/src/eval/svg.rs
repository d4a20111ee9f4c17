//! Minimal self-contained SVG rendering. Presentation only.

use std::fmt::Write as _;

use crate::tensor::Tensor;

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// White (low) to dark blue (high).
fn shade(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

pub fn heat_map(m: &Tensor, title: &str) -> String {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let cell = (600.0 / rows.max(cols) as f64).clamp(2.0, 40.0);
    let (w, h) = (cols as f64 * cell + 80.0, rows as f64 * cell + 70.0);
    let lo = m.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<text x="10" y="20" font-family="sans-serif" font-size="13">{}</text>"#, escape(title));
    for i in 0..rows {
        for j in 0..cols {
            let v = m.data()[i * cols + j];
            let t = if span > 0.0 { (v - lo) / span } else { 0.5 };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}"><title>({i}, {j}) {v}</title></rect>"#,
                40.0 + j as f64 * cell,
                40.0 + i as f64 * cell,
                shade(t)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="10" y="{:.0}" font-family="sans-serif" font-size="11">min {lo:.4}, max {hi:.4}</text>"#,
        h - 10.0
    );
    s.push_str("</svg>\n");
    s
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], series: &[(&str, &[f64])]) -> String {
    let (w, h) = (900.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let (xmin, xmax) = bounds(xs.iter().copied());
    let (ymin, ymax) = bounds(series.iter().flat_map(|(_, ys)| ys.iter().copied()));
    let sx = |x: f64| left + (x - xmin) / (xmax - xmin) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - ymin) / (ymax - ymin) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="22" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{0}" stroke="black"/>"#,
        h - bottom,
        w - right
    );
    for (v, y) in [(ymin, h - bottom), (ymax, top)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.0}" y="{y:.0}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.2}</text>"#,
            left - 5.0
        );
    }
    for (v, x) in [(xmin, left), (xmax, w - right)] {
        let _ = writeln!(
            s,
            r#"<text x="{x:.0}" y="{:.0}" font-family="sans-serif" font-size="11" text-anchor="middle">{v}</text>"#,
            h - bottom + 15.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.0}" y="{:.0}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        h - 10.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.0}" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {:.0})" text-anchor="middle">{}</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0,
        escape(ylabel)
    );
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut points = String::new();
        for (x, y) in xs.iter().zip(ys.iter()) {
            let _ = write!(points, "{:.2},{:.2} ", sx(*x), sy(*y));
        }
        if xs.len() == 1 {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(xs[0]), sy(ys[0]));
        } else {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                points.trim_end()
            );
        }
        let ly = top + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.0}" y="{ly:.0}" font-family="sans-serif" font-size="12" fill="{color}" text-anchor="end">{}</text>"#,
            w - right,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_matrix_is_one_colour() {
        let m = Tensor::full(&[3, 3], 1.0 / 3.0);
        let doc = heat_map(&m, "u");
        let fills: std::collections::BTreeSet<&str> = doc
            .match_indices("fill=\"#")
            .map(|(i, _)| &doc[i + 6..i + 13])
            .collect();
        assert_eq!(fills.len(), 1);
    }
}
