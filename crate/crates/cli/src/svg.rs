//! Minimal deterministic SVG rendering: heatmaps and banded line charts.

use std::fmt::Write;

const VIRIDIS: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

const EMPTY_CELL: &str = "#d9d9d9";

/// Hex colour for `t` in `[0, 1]` (clamped) on a viridis-like ramp.
pub fn ramp(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    let mix = |p: f64, q: f64| (p + (q - p) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn num(x: f64) -> String {
    let s = format!("{x:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
}

/// Grid heatmap. `cells[i][j]` is the fitness in descriptor bin `(i, j)`;
/// `i` runs along x, `j` along y (drawn bottom to top). The colour scale
/// spans `[lo, hi]`.
pub fn heatmap(title: &str, cells: &[Vec<Option<f64>>], lo: f64, hi: f64, axes: [&str; 2]) -> String {
    let nx = cells.len();
    let ny = cells.first().map_or(0, |c| c.len());
    let cell = 32.0;
    let (left, top) = (50.0, 30.0);
    let bar_x = left + nx as f64 * cell + 20.0;
    let width = bar_x + 90.0;
    let height = top + ny as f64 * cell + 45.0;
    let mut out = String::new();
    header(&mut out, width, height);
    let _ = writeln!(out, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, escape(title));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (i, col) in cells.iter().enumerate() {
        for (j, v) in col.iter().enumerate() {
            let x = left + i as f64 * cell;
            let y = top + (ny - 1 - j) as f64 * cell;
            let fill = match v {
                Some(f) => ramp((f - lo) / span),
                None => EMPTY_CELL.into(),
            };
            let _ = writeln!(
                out,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="white" stroke-width="1"/>"#
            );
        }
    }
    let bottom = top + ny as f64 * cell;
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + nx as f64 * cell / 2.0,
        bottom + 30.0,
        escape(axes[0])
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        top + ny as f64 * cell / 2.0,
        top + ny as f64 * cell / 2.0,
        escape(axes[1])
    );
    // Colour bar, high at the top.
    let steps = 20;
    let bar_h = ny as f64 * cell;
    for k in 0..steps {
        let t = 1.0 - (k as f64 + 0.5) / steps as f64;
        let y = top + k as f64 * bar_h / steps as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{bar_x}" y="{}" width="16" height="{}" fill="{}"/>"#,
            num(y),
            num(bar_h / steps as f64 + 0.5),
            ramp(t)
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, bar_x + 22.0, top + 10.0, num(hi));
    let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, bar_x + 22.0, top + bar_h, num(lo));
    out.push_str("</svg>\n");
    out
}

/// A line with a shaded band. Points with `None` mean are skipped.
pub struct Series<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub mean: &'a [Option<f64>],
    pub std: &'a [Option<f64>],
}

pub fn line_chart(title: &str, x_label: &str, series: &[Series<'_>]) -> String {
    let (w, h) = (520.0, 320.0);
    let (left, right, top, bottom) = (60.0, 20.0, 30.0, 45.0);
    let pts = |s: &Series<'_>| -> Vec<(f64, f64, f64)> {
        s.x.iter()
            .zip(s.mean)
            .zip(s.std)
            .filter_map(|((x, m), sd)| m.map(|m| (*x, m, sd.unwrap_or(0.0))))
            .collect()
    };
    let all: Vec<(f64, f64, f64)> = series.iter().flat_map(pts).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, m, s) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(m - s);
        y1 = y1.max(m + s);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * (h - top - bottom);
    let mut out = String::new();
    header(&mut out, w, h);
    let _ = writeln!(out, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(
        out,
        r##"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        w - left - right,
        h - top - bottom
    );
    for (v, y) in [(y1, top), (y0, h - bottom)] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, num(y + 4.0), num(v));
    }
    for (v, x) in [(x0, left), (x1, w - right)] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, num(x), h - bottom + 14.0, num(v));
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        h - 8.0,
        escape(x_label)
    );
    let colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    for (k, s) in series.iter().enumerate() {
        let c = colours[k % colours.len()];
        let p = pts(s);
        if p.is_empty() {
            continue;
        }
        let upper: Vec<String> = p.iter().map(|&(x, m, sd)| format!("{},{}", num(px(x)), num(py(m + sd)))).collect();
        let lower: Vec<String> = p.iter().rev().map(|&(x, m, sd)| format!("{},{}", num(px(x)), num(py(m - sd)))).collect();
        let _ = writeln!(
            out,
            r#"<polygon points="{} {}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = p.iter().map(|&(x, m, _)| format!("{},{}", num(px(x)), num(py(m)))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, line.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            left + 8.0,
            top + 14.0 + 14.0 * k as f64,
            escape(s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
        assert_eq!(ramp(2.0), ramp(1.0));
        assert_eq!(ramp(f64::NAN), ramp(0.0));
    }

    #[test]
    fn empty_heatmap_is_all_grey() {
        let cells = vec![vec![None; 3]; 3];
        let svg = heatmap("t", &cells, 0.0, 1.0, ["a", "b"]);
        assert_eq!(svg.matches(EMPTY_CELL).count(), 9);
    }

    #[test]
    fn chart_is_stable_and_handles_gaps() {
        let x = [0.0, 1.0, 2.0];
        let m = [None, Some(1.0), Some(2.0)];
        let s = [None, Some(0.5), Some(0.0)];
        let series = [Series {
            label: "a<b",
            x: &x,
            mean: &m,
            std: &s,
        }];
        let a = line_chart("t", "iteration", &series);
        assert_eq!(a, line_chart("t", "iteration", &series));
        assert!(a.contains("a&lt;b"));
        assert!(a.contains("<polyline"));
    }
}
