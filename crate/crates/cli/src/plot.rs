//! Minimal deterministic SVG line charts.
//!
//! A [`Series`] holds one curve per seed on a shared step grid. It is drawn
//! as the pointwise mean, plus a min..max band when there is more than one
//! curve. Numbers are printed with fixed precision so equal inputs give
//! byte-identical files.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlotError {
    #[error("nothing to plot")]
    Empty,
    #[error("series `{0}` has no finite points")]
    NoFinitePoints(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// One curve per seed, each a list of `(x, y)`.
    pub curves: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

/// Pointwise `(x, mean, min, max)` over curves, truncated to the shortest.
pub fn band(curves: &[Vec<(f64, f64)>]) -> Vec<(f64, f64, f64, f64)> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let ys = curves.iter().map(|c| c[i].1);
            let mean = ys.clone().sum::<f64>() / curves.len() as f64;
            let lo = ys.clone().fold(f64::INFINITY, f64::min);
            let hi = ys.fold(f64::NEG_INFINITY, f64::max);
            (curves[0][i].0, mean, lo, hi)
        })
        .collect()
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Option<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return None;
        }
        if hi - lo < 1e-12 {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
            lo -= pad;
            hi += pad;
        }
        Some(Axis { lo, hi, log })
    }

    fn frac(&self, v: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let v = if self.log { v.log10() } else { v };
        Some((v - self.lo) / (self.hi - self.lo))
    }

    fn tick_label(&self, i: usize) -> String {
        let t = self.lo + (self.hi - self.lo) * i as f64 / (TICKS - 1) as f64;
        let v = if self.log { 10f64.powf(t) } else { t };
        if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
            format!("{v:.2e}")
        } else {
            format!("{v:.3}")
        }
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(chart: &Chart) -> Result<String, PlotError> {
    if chart.series.is_empty() || chart.series.iter().all(|s| s.curves.is_empty()) {
        return Err(PlotError::Empty);
    }
    let bands: Vec<(&Series, Vec<(f64, f64, f64, f64)>)> = chart
        .series
        .iter()
        .filter(|s| !s.curves.is_empty())
        .map(|s| (s, band(&s.curves)))
        .collect();
    for (s, b) in &bands {
        if !b.iter().any(|p| p.1.is_finite() && (!chart.log_y || p.1 > 0.0)) {
            return Err(PlotError::NoFinitePoints(s.label.clone()));
        }
    }
    let xs = Axis::fit(bands.iter().flat_map(|(_, b)| b.iter().map(|p| p.0)), false)
        .ok_or(PlotError::Empty)?;
    let ys = Axis::fit(
        bands.iter().flat_map(|(_, b)| b.iter().flat_map(|p| [p.1, p.2, p.3])),
        chart.log_y,
    )
    .ok_or(PlotError::Empty)?;

    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| xs.frac(x).map(|f| LEFT + f * pw);
    let py = |y: f64| ys.frac(y).map(|f| TOP + (1.0 - f) * ph);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        esc(&chart.title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let x = LEFT + f * pw;
        let y = TOP + (1.0 - f) * ph;
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            xs.tick_label(i)
        );
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{LEFT}\" y2=\"{y:.1}\" stroke=\"black\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0,
            ys.tick_label(i)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        esc(&chart.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(&chart.y_label),
        if chart.log_y { " (log)" } else { "" }
    );

    for (k, (series, b)) in bands.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if series.curves.len() > 1 {
            let upper: Vec<(f64, f64)> = b
                .iter()
                .filter_map(|p| Some((px(p.0)?, py(p.3)?)))
                .collect();
            let lower: Vec<(f64, f64)> = b
                .iter()
                .rev()
                .filter_map(|p| Some((px(p.0)?, py(p.2)?)))
                .collect();
            let pts = points(upper.iter().chain(&lower));
            let _ = writeln!(
                s,
                r#"<polygon class="band" points="{pts}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#
            );
        }
        let mean: Vec<(f64, f64)> = b
            .iter()
            .filter_map(|p| Some((px(p.0)?, py(p.1)?)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points(mean.iter())
        );
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            esc(&series.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn points<'a>(it: impl Iterator<Item = &'a (f64, f64)>) -> String {
    it.map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chart(curves: Vec<Vec<(f64, f64)>>) -> Chart {
        Chart {
            title: "loss".into(),
            x_label: "step".into(),
            y_label: "loss".into(),
            log_y: false,
            series: vec![Series {
                label: "sgd".into(),
                curves,
            }],
        }
    }

    #[test]
    fn empty_is_an_error() {
        assert_eq!(render(&chart(vec![])), Err(PlotError::Empty));
        let mut c = chart(vec![]);
        c.series.clear();
        assert_eq!(render(&c), Err(PlotError::Empty));
    }

    #[test]
    fn single_seed_has_no_band() {
        let svg = render(&chart(vec![vec![(0.0, 1.0), (1.0, 0.5)]])).unwrap();
        assert!(!svg.contains("class=\"band\""));
        assert_eq!(svg.matches("class=\"mean\"").count(), 1);
    }

    #[test]
    fn band_spans_min_to_max() {
        let curves: Vec<Vec<(f64, f64)>> = (0..5)
            .map(|s| (0..4).map(|t| (t as f64, (s * 3 + t) as f64)).collect())
            .collect();
        let b = band(&curves);
        for (t, (x, mean, lo, hi)) in b.iter().enumerate() {
            assert_eq!(*x, t as f64);
            assert_eq!(*lo, t as f64);
            assert_eq!(*hi, (12 + t) as f64);
            assert!((mean - (6 + t) as f64).abs() < 1e-12);
        }
        assert!(render(&chart(curves)).unwrap().contains("class=\"band\""));
    }

    #[test]
    fn byte_identical() {
        let c = chart(vec![vec![(0.0, 3.0), (5.0, 1.0)], vec![(0.0, 2.0), (5.0, 0.1)]]);
        assert_eq!(render(&c).unwrap(), render(&c).unwrap());
    }

    #[test]
    fn log_axis_skips_non_positive() {
        let mut c = chart(vec![vec![(0.0, 0.0), (1.0, 10.0), (2.0, 100.0)]]);
        c.log_y = true;
        let svg = render(&c).unwrap();
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        c.series[0].curves = vec![vec![(0.0, -1.0)]];
        assert!(matches!(render(&c), Err(PlotError::NoFinitePoints(_))));
    }
}
