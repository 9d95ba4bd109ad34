//! Minimal SVG rendering for sweep results.

use std::fmt::Write as _;

use crate::windowing::{SweepReport, SWEEP_COLUMNS};

const CELL: f64 = 64.0;
const MARGIN: f64 = 110.0;

/// Blue for −1, white for 0, red for +1.
fn diverging(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let fade = |c: f64| (255.0 - (255.0 - c) * v.abs()).round() as u8;
    let (r, g, b) = if v >= 0.0 {
        (255, fade(60.0), fade(60.0))
    } else {
        (fade(60.0), fade(90.0), 255)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Pearson correlations between the sweep columns; undefined cells are grey.
pub fn correlation_heatmap_svg(report: &SweepReport) -> String {
    let n = SWEEP_COLUMNS.len();
    let size = MARGIN + CELL * n as f64 + 20.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    for (i, name) in SWEEP_COLUMNS.iter().enumerate() {
        let c = MARGIN + CELL * (i as f64 + 0.5);
        writeln!(s, r#"<text x="{}" y="{c}" text-anchor="end" dominant-baseline="middle">{}</text>"#, MARGIN - 6.0, escape(name)).unwrap();
        writeln!(
            s,
            r#"<text x="{c}" y="{}" text-anchor="start" transform="rotate(-45 {c} {})">{}</text>"#,
            MARGIN - 6.0,
            MARGIN - 6.0,
            escape(name)
        )
        .unwrap();
    }
    for (i, row) in report.correlation.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x, y) = (MARGIN + CELL * j as f64, MARGIN + CELL * i as f64);
            let (fill, label) = match v {
                Some(v) => (diverging(*v), format!("{v:.2}")),
                None => ("#cccccc".to_string(), "n/a".to_string()),
            };
            writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="white"/>"#).unwrap();
            writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" dominant-baseline="middle">{label}</text>"#,
                x + CELL / 2.0,
                y + CELL / 2.0
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// One bar per grid configuration, height = positive ratio.
pub fn imbalance_svg(report: &SweepReport) -> String {
    let (bar, height, top, left, bottom) = (18.0, 240.0, 20.0, 50.0, 110.0);
    let width = left + bar * report.rows.len() as f64 * 1.5 + 20.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="10">"#,
        top + height + bottom
    )
    .unwrap();
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + height * (1.0 - v);
        writeln!(s, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd"/>"##, width - 10.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end" dominant-baseline="middle">{v:.2}</text>"#, left - 4.0).unwrap();
    }
    for (k, r) in report.rows.iter().enumerate() {
        let x = left + bar * (0.25 + 1.5 * k as f64);
        let label = format!("{}/{}/{}", r.patch_len, r.stride, r.pred_len);
        let lx = x + bar / 2.0;
        let ly = top + height + 8.0;
        match r.positive_ratio {
            Some(p) => {
                let h = height * p;
                writeln!(s, r##"<rect x="{x}" y="{}" width="{bar}" height="{h}" fill="#d9534f"/>"##, top + height - h).unwrap();
            }
            None => {
                writeln!(s, r#"<text x="{lx}" y="{}" text-anchor="middle">n/a</text>"#, top + height - 4.0).unwrap();
            }
        }
        writeln!(s, r#"<text x="{lx}" y="{ly}" text-anchor="end" transform="rotate(-60 {lx} {ly})">{label}</text>"#).unwrap();
    }
    writeln!(s, r#"<text x="{left}" y="12">positive ratio by patch_len/stride/pred_len</text>"#).unwrap();
    s.push_str("</svg>\n");
    s
}
