//! Minimal SVG line charts for run artifacts.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

/// One polyline of `ys` against their index, with axis extents in the corners.
pub fn line_chart(title: &str, ys: &[f64]) -> String {
    let finite: Vec<f64> = ys.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let (lo, hi) = if finite.is_empty() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let span_x = (ys.len().max(2) - 1) as f64;
    let px = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / span_x;
    let py = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut points = String::new();
    for (i, &v) in ys.iter().enumerate().filter(|(_, v)| v.is_finite()) {
        let _ = write!(points, "{:.2},{:.2} ", px(i), py(v));
    }
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    for (y, v) in [(y0, hi), (y1, lo)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.4}</text>"#,
            x0 - 4.0,
            y + 3.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{x1}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
        y1 + 14.0,
        ys.len().saturating_sub(1)
    );
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
        points.trim_end()
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_vertex_per_finite_value() {
        let svg = line_chart("loss <train>", &[1.0, 0.5, f64::NAN, 0.25]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("loss &lt;train&gt;"));
        let poly = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts = poly.split('"').nth(1).unwrap();
        assert_eq!(pts.split(' ').count(), 3);
    }

    #[test]
    fn flat_and_empty_series_render() {
        assert!(line_chart("flat", &[0.3; 5]).contains("<polyline"));
        assert!(line_chart("empty", &[]).ends_with("</svg>\n"));
    }
}
