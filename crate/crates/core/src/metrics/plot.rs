//! Minimal SVG scatter plot of set size against an uncertainty measure.

use std::collections::BTreeMap;
use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// One plotted point: `(uncertainty, set size)`.
pub type Point = (f64, f64);

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders points grouped by colour, with a legend in the upper-left corner.
pub fn scatter_svg(title: &str, x_label: &str, series: &BTreeMap<String, Vec<Point>>) -> String {
    let all = series.values().flatten();
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 1.0f64);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let y0 = 0.0;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
    let (bx, by) = (MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{bx} {} L{bx} {by} L{} {by}" stroke="black" fill="none"/>"#,
        MARGIN,
        WIDTH - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">set size</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (label, v) in [(format!("{x0:.3}"), x0), (format!("{x1:.3}"), x1)] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{label}</text>"#, sx(v), by + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{y1}</text>"#, bx - 6.0, sy(y1) + 4.0);
    for (i, (group, points)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        for &(x, y) in points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{colour}" fill-opacity="0.5"/>"#,
                sx(x),
                sy(y)
            );
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(s, r#"<circle cx="{}" cy="{ly}" r="4" fill="{colour}"/>"#, MARGIN + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, MARGIN + 26.0, ly + 4.0, escape(group));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_circle_per_point_plus_legend() {
        let series = BTreeMap::from([
            ("1".to_string(), vec![(0.1, 1.0), (0.3, 2.0)]),
            ("<6>".to_string(), vec![(0.2, 3.0)]),
        ]);
        let svg = scatter_svg("aps", "entropy", &series);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 5);
        assert!(svg.contains("&lt;6&gt;"));
    }

    #[test]
    fn empty_series_renders() {
        assert!(scatter_svg("t", "x", &BTreeMap::new()).ends_with("</svg>\n"));
    }
}
