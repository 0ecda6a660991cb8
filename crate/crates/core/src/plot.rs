//! Figure data: CSV tables and small static SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::density::Density;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    out: String,
}

impl Frame {
    fn new(title: &str, x: (f64, f64), y: (f64, f64), x_label: &str, y_label: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title));
        let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 2.0 + 8.0);
        let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
        let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 10.0, escape(x_label));
        let _ = writeln!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        for (v, px) in [(x.0, x0), (x.1, x1)] {
            let _ = writeln!(out, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, y0 + 14.0, fmt_tick(v));
        }
        for (v, py) in [(y.0, y0), (y.1, y1)] {
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 4.0, py + 4.0, fmt_tick(v));
        }
        Self { x, y, out }
    }

    fn px(&self, v: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(f64::MIN_POSITIVE);
        MARGIN + (v - self.x.0) / span * (WIDTH - 1.5 * MARGIN)
    }

    fn py(&self, v: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(f64::MIN_POSITIVE);
        HEIGHT - MARGIN - (v - self.y.0) / span * (HEIGHT - 1.5 * MARGIN - 8.0)
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Line chart of one or more densities of the same kind.
pub fn density_svg(title: &str, series: &[(String, &Density)]) -> String {
    let Some((_, first)) = series.first() else {
        return Frame::new(title, (0.0, 1.0), (0.0, 1.0), "", "").finish();
    };
    let grid = first.grid();
    let x = (grid.point(0), grid.point(grid.n - 1));
    let top = series
        .iter()
        .flat_map(|(_, d)| d.values.iter().copied())
        .fold(0.0f64, f64::max);
    let x_label = match first.kind {
        crate::density::Kind::Melody => "interval (semitones)",
        crate::density::Kind::Rhythm => "inter-onset ratio",
    };
    let mut f = Frame::new(title, x, (0.0, top.max(f64::MIN_POSITIVE)), x_label, "density");
    for (k, (name, d)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = d
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", f.px(grid.point(i)), f.py(*v)))
            .collect();
        let _ = writeln!(
            f.out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.2" points="{}"><title>{}</title></polyline>"#,
            points.join(" "),
            escape(name)
        );
        let _ = writeln!(
            f.out,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            WIDTH - MARGIN * 2.5,
            MARGIN + 14.0 * k as f64,
            escape(name)
        );
    }
    f.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub label: String,
    pub group: String,
    pub x: f64,
    pub y: f64,
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

/// Scatter with one marker per point, coloured by group.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, points: &[ScatterPoint]) -> String {
    let x = padded_range(points.iter().map(|p| p.x));
    let y = padded_range(points.iter().map(|p| p.y));
    let mut colours: BTreeMap<&str, &str> = BTreeMap::new();
    for p in points {
        let n = colours.len();
        colours.entry(&p.group).or_insert(PALETTE[n % PALETTE.len()]);
    }
    let mut f = Frame::new(title, x, y, x_label, y_label);
    for p in points {
        let _ = writeln!(
            f.out,
            r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="4" fill="{}"><title>{} ({})</title></circle>"#,
            f.px(p.x),
            f.py(p.y),
            colours[p.group.as_str()],
            escape(&p.label),
            escape(&p.group)
        );
    }
    for (k, (group, colour)) in colours.iter().enumerate() {
        let _ = writeln!(
            f.out,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            WIDTH - MARGIN * 2.5,
            MARGIN + 14.0 * k as f64,
            escape(group)
        );
    }
    f.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub label: String,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Bars from zero with confidence-interval whiskers.
pub fn bar_svg(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let y = padded_range(
        bars.iter()
            .flat_map(|b| [b.ci_low, b.ci_high, b.estimate, 0.0])
            .filter(|v| v.is_finite()),
    );
    let n = bars.len().max(1) as f64;
    let mut f = Frame::new(title, (0.0, n), y, "", y_label);
    let zero = f.py(0.0);
    for (i, b) in bars.iter().enumerate() {
        let (left, right) = (f.px(i as f64 + 0.2), f.px(i as f64 + 0.8));
        let top = f.py(b.estimate);
        let _ = writeln!(
            f.out,
            r##"<rect class="bar" x="{left:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4"><title>{}</title></rect>"##,
            top.min(zero),
            right - left,
            (top - zero).abs(),
            escape(&b.label)
        );
        let mid = (left + right) / 2.0;
        let (lo, hi) = (f.py(b.ci_low), f.py(b.ci_high));
        let _ = writeln!(f.out, r#"<line class="whisker" x1="{mid:.2}" y1="{lo:.2}" x2="{mid:.2}" y2="{hi:.2}" stroke="black"/>"#);
        for yy in [lo, hi] {
            let _ = writeln!(f.out, r#"<line x1="{:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="black"/>"#, mid - 5.0, mid + 5.0);
        }
        let _ = writeln!(
            f.out,
            r#"<text x="{mid:.2}" y="{}" text-anchor="middle" font-size="9">{}</text>"#,
            HEIGHT - MARGIN + 26.0,
            escape(&b.label)
        );
    }
    f.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::Kind;

    #[test]
    fn density_chart_has_one_line_per_series() {
        let mut v = vec![0.0; 1001];
        v[500] = 1.0;
        let d = Density::normalized(Kind::Rhythm, v).unwrap();
        let svg = density_svg("Rhythm", &[("all".into(), &d), ("AA".into(), &d)]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn scatter_has_one_marker_per_point() {
        let pts: Vec<ScatterPoint> = (0..7)
            .map(|i| ScatterPoint {
                label: format!("C{i}"),
                group: if i % 2 == 0 { "East".into() } else { "West & co".into() },
                x: i as f64 / 7.0,
                y: 1.0 - i as f64 / 7.0,
            })
            .collect();
        let svg = scatter_svg("Diversity", "melody", "rhythm", &pts);
        assert_eq!(svg.matches(r#"class="marker""#).count(), 7);
        assert!(svg.contains("West &amp; co"));
    }

    #[test]
    fn bars_have_whiskers() {
        let bars = vec![
            Bar { label: "ethnic".into(), estimate: 0.2, ci_low: -0.1, ci_high: 0.45 },
            Bar { label: "genetic".into(), estimate: -0.3, ci_low: -0.5, ci_high: 0.0 },
        ];
        let svg = bar_svg("Correlations", "r", &bars);
        assert_eq!(svg.matches(r#"class="bar""#).count(), 2);
        assert_eq!(svg.matches(r#"class="whisker""#).count(), 2);
    }
}
