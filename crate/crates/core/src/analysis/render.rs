use std::fmt::Write;

use super::OverlapMatrix;

/// Header row and column of language ids; entries in percent.
pub(super) fn csv(m: &OverlapMatrix) -> String {
    let mut s = String::from("language");
    for l in &m.languages {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for (l, row) in m.languages.iter().zip(&m.values) {
        s.push_str(l);
        for v in row {
            write!(s, ",{:.2}", 100.0 * v).unwrap();
        }
        s.push('\n');
    }
    s
}

const CELL: usize = 56;
const MARGIN: usize = 64;

fn shade(v: f64) -> (u8, u8, u8) {
    let t = v.clamp(0.0, 1.0);
    let mix = |lo: f64, hi: f64| (lo + (hi - lo) * t).round() as u8;
    (mix(247.0, 8.0), mix(251.0, 48.0), mix(255.0, 107.0))
}

pub(super) fn svg(m: &OverlapMatrix) -> String {
    let n = m.languages.len();
    let size = MARGIN + n * CELL + 8;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{size}" height="{size}" fill="white"/>"#).unwrap();
    for (i, l) in m.languages.iter().enumerate() {
        let c = MARGIN + i * CELL + CELL / 2;
        writeln!(s, r#"<text x="{c}" y="{}" text-anchor="middle">{l}</text>"#, MARGIN - 10).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{l}</text>"#, MARGIN - 8, c + 4).unwrap();
    }
    for (i, row) in m.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (r, g, b) = shade(v);
            let (x, y) = (MARGIN + j * CELL, MARGIN + i * CELL);
            writeln!(s, r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#{r:02x}{g:02x}{b:02x}" stroke="white"/>"##)
                .unwrap();
            let ink = if v > 0.6 { "white" } else { "black" };
            writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{:.1}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4,
                100.0 * v
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}
