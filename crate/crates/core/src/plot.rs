//! Minimal SVG emitters for scatter and line plots.

use std::fmt::Write as _;

use crate::numcore::Tensor;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    const W: f64 = 480.0;
    const H: f64 = 480.0;
    const PAD: f64 = 40.0;

    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let span = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Frame {
            x: span(&mut xs.clone()),
            y: span(&mut ys.clone()),
        }
    }

    fn px(&self, v: f64) -> f64 {
        Self::PAD + (v - self.x.0) / (self.x.1 - self.x.0) * (Self::W - 2.0 * Self::PAD)
    }

    fn py(&self, v: f64) -> f64 {
        Self::H - Self::PAD - (v - self.y.0) / (self.y.1 - self.y.0) * (Self::H - 2.0 * Self::PAD)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}"><rect width="{w}" height="{h}" fill="white"/><text x="{cx}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{t}</text>"#,
        w = Frame::W,
        h = Frame::H,
        cx = Frame::W / 2.0,
        t = escape(title)
    );
}

/// Scatter of the first two columns, coloured by label.
pub fn scatter_svg(points: &Tensor, labels: Option<&[usize]>, title: &str) -> String {
    let n = points.rows();
    let f = Frame::fit((0..n).map(|r| points.get(r, 0)), (0..n).map(|r| points.get(r, 1)));
    let mut out = String::new();
    header(&mut out, title);
    for r in 0..n {
        let c = labels.map_or(PALETTE[0], |l| PALETTE[l[r] % PALETTE.len()]);
        let _ = write!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{c}" fill-opacity="0.6"/>"#,
            f.px(points.get(r, 0)),
            f.py(points.get(r, 1))
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One labelled marker per `(x, y, label)` point, joined per series name.
pub fn points_svg(points: &[(f64, f64, String)], x_label: &str, y_label: &str, title: &str) -> String {
    let f = Frame::fit(points.iter().map(|p| p.0), points.iter().map(|p| p.1));
    let mut out = String::new();
    header(&mut out, title);
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text><text x="12" y="{}" font-family="sans-serif" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
        Frame::W / 2.0,
        Frame::H - 8.0,
        escape(x_label),
        Frame::H / 2.0,
        Frame::H / 2.0,
        escape(y_label)
    );
    for (i, (x, y, name)) in points.iter().enumerate() {
        let (cx, cy) = (f.px(*x), f.py(*y));
        let _ = write!(
            out,
            r#"<g class="point"><circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="{}"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10">{}</text></g>"#,
            PALETTE[i % PALETTE.len()],
            cx + 6.0,
            cy - 6.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
