//! Standalone SVG line plot: measured output, predicted mean and a ±kσ band.

use std::fmt::Write as _;

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 40.0;

pub struct Series<'a> {
    pub y: &'a [f64],
    pub mean: &'a [f64],
    pub lower: &'a [f64],
    pub upper: &'a [f64],
}

fn points(xs: impl Iterator<Item = (f64, f64)>) -> String {
    let mut s = String::new();
    for (i, (x, y)) in xs.enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x:.2},{y:.2}").unwrap();
    }
    s
}

pub fn render(title: &str, series: &Series<'_>) -> String {
    let n = series.y.len().max(2);
    let all = series.y.iter().chain(series.lower).chain(series.upper).chain(series.mean);
    let (mut lo, mut hi) = all
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() || hi <= lo {
        lo = -1.0;
        hi = 1.0;
    }
    let sx = |t: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * t as f64 / (n - 1) as f64;
    let sy = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let band = points(
        series
            .upper
            .iter()
            .enumerate()
            .map(|(t, &v)| (sx(t), sy(v)))
            .chain(series.lower.iter().enumerate().rev().map(|(t, &v)| (sx(t), sy(v)))),
    );
    let truth = points(series.y.iter().enumerate().map(|(t, &v)| (sx(t), sy(v))));
    let mean = points(series.mean.iter().enumerate().map(|(t, &v)| (sx(t), sy(v))));
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{title}</text>"#).unwrap();
    writeln!(svg, r##"<polygon class="band" points="{band}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##).unwrap();
    writeln!(svg, r#"<polyline class="measured" points="{truth}" fill="none" stroke="black" stroke-width="1"/>"#).unwrap();
    writeln!(svg, r##"<polyline class="mean" points="{mean}" fill="none" stroke="#d62728" stroke-width="1"/>"##).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">min {lo:.3}  max {hi:.3}  steps {}</text>"#,
        MARGIN,
        HEIGHT - 12.0,
        series.y.len()
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structure_and_ranges() {
        let y = [0.0, 1.0, -1.0, 0.5];
        let m = [0.1, 0.9, -0.8, 0.4];
        let lo: Vec<f64> = m.iter().map(|v| v - 0.3).collect();
        let hi: Vec<f64> = m.iter().map(|v| v + 0.3).collect();
        let svg = render("a < b", &Series {
            y: &y,
            mean: &m,
            lower: &lo,
            upper: &hi,
        });
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let count = |tag: &str| doc.descendants().filter(|n| n.has_tag_name(tag)).count();
        assert_eq!((count("polyline"), count("polygon")), (2, 1));
        let band = doc.descendants().find(|n| n.has_tag_name("polygon")).unwrap();
        assert_eq!(band.attribute("points").unwrap().split(' ').count(), 8);
    }
}
