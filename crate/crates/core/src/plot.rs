//! Deterministic SVG scatter plots of AV predictions.

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::anchors::AnchorTable;
use crate::embed::AV_BOUND;
use crate::formats::AvRecord;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 640.0;
const MARGIN: f64 = 60.0;
/// Side length of the square plotting area in SVG units.
const PLOT_SIZE: f64 = 520.0;
const CROSS_HALF: f64 = 6.0;

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939",
];
const UNLABELED: &str = "#999999";

/// Maps AV coordinates (axes spanning `[-1.2, 1.2]`) to SVG user units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub left: f64,
    pub top: f64,
    pub size: f64,
    pub bound: f64,
}

impl Default for Viewport {
    fn default() -> Self {
        Viewport {
            left: MARGIN,
            top: MARGIN,
            size: PLOT_SIZE,
            bound: AV_BOUND,
        }
    }
}

impl Viewport {
    pub fn x(&self, valence: f64) -> f64 {
        self.left + (valence + self.bound) / (2.0 * self.bound) * self.size
    }

    pub fn y(&self, arousal: f64) -> f64 {
        self.top + (self.bound - arousal) / (2.0 * self.bound) * self.size
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders one circle per record colored by label, anchors as labeled crosses,
/// axes and a legend.
pub fn plot_scatter(records: &[AvRecord], anchors: &AnchorTable) -> String {
    let vp = Viewport::default();
    let labels: Vec<&str> = records
        .iter()
        .filter_map(|r| r.label.as_deref())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let color = |label: Option<&str>| match label {
        Some(l) => labels
            .iter()
            .position(|x| *x == l)
            .map_or(UNLABELED, |i| PALETTE[i % PALETTE.len()]),
        None => UNLABELED,
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );

    // Frame, zero axes and ticks.
    let (x0, x1, y0, y1) = (vp.x(-vp.bound), vp.x(vp.bound), vp.y(vp.bound), vp.y(-vp.bound));
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black" fill="none"><rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}"/><line x1="{:.2}" y1="{y0:.2}" x2="{:.2}" y2="{y1:.2}" stroke-dasharray="4 3"/><line x1="{x0:.2}" y1="{:.2}" x2="{x1:.2}" y2="{:.2}" stroke-dasharray="4 3"/></g>"#,
        x1 - x0,
        y1 - y0,
        vp.x(0.0),
        vp.x(0.0),
        vp.y(0.0),
        vp.y(0.0),
    );
    let _ = writeln!(s, r#"<g class="ticks" text-anchor="middle">"#);
    for t in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{y1:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}">{t}</text>"#,
            y1 + 5.0,
            y1 + 20.0,
            x = vp.x(t),
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{t}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            vp.y(t) + 4.0,
            y = vp.y(t),
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">Valence</text>"#,
        vp.x(0.0),
        y1 + 42.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14" transform="rotate(-90 {:.2} {:.2})">Arousal</text>"#,
        x0 - 40.0,
        vp.y(0.0),
        x0 - 40.0,
        vp.y(0.0)
    );

    let _ = writeln!(s, r#"<g class="points" fill-opacity="0.6">"#);
    for r in records {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#,
            vp.x(r.valence),
            vp.y(r.arousal),
            color(r.label.as_deref())
        );
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g class="anchors" stroke="black" stroke-width="2">"#);
    for (name, av) in anchors.iter() {
        let (cx, cy) = (vp.x(av.valence), vp.y(av.arousal));
        let h = CROSS_HALF;
        let _ = writeln!(
            s,
            r#"<path data-anchor="{}" d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}"/><text x="{:.2}" y="{:.2}" stroke="none" font-size="10">{}</text>"#,
            escape(name),
            cx - h,
            cy - h,
            cx + h,
            cy + h,
            cx - h,
            cy + h,
            cx + h,
            cy - h,
            cx + h + 2.0,
            cy - h,
            escape(name)
        );
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g class="legend">"#);
    let lx = vp.left + vp.size + 24.0;
    let mut ly = vp.top;
    let mut entries: Vec<(&str, &str)> = labels.iter().map(|l| (*l, color(Some(l)))).collect();
    if records.iter().any(|r| r.label.is_none()) {
        entries.push(("unlabeled", UNLABELED));
    }
    for (name, c) in entries {
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{c}"/><text x="{:.2}" y="{ly:.2}">{}</text>"#,
            ly - 9.0,
            lx + 16.0,
            escape(name)
        );
        ly += 18.0;
    }
    let _ = writeln!(
        s,
        r#"<path d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="black" stroke-width="2"/><text x="{:.2}" y="{ly:.2}">anchor</text>"#,
        lx,
        ly - 10.0,
        lx + 10.0,
        ly,
        lx,
        ly,
        lx + 10.0,
        ly - 10.0,
        lx + 16.0
    );
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}
