use std::fmt::Write;

use super::{AblationTable, SeveritySweep};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, y_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = y_pos(v);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{v:.2}</text>"#,
            x0 - 5.0,
            y + 3.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="12" y="{}" font-size="11" transform="rotate(-90 12 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn y_pos(v: f64) -> f64 {
    HEIGHT - MARGIN - v.clamp(0.0, 1.0) * (HEIGHT - 2.0 * MARGIN)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of accuracy against severity, one line per corruption kind.
pub fn severity_curves_svg(title: &str, sweep: &SeveritySweep) -> String {
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, "accuracy");
    let levels = super::SEVERITY_LEVELS;
    let x_pos = |i: usize| MARGIN + (i as f64 + 0.5) * (WIDTH - 2.0 * MARGIN) / levels as f64;
    for i in 0..levels {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            x_pos(i),
            HEIGHT - MARGIN + 15.0,
            i + 1
        );
    }
    for (n, (kind, accs)) in sweep.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let points: Vec<String> = accs
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{:.1},{:.1}", x_pos(i), y_pos(*a)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{kind}</text>"#,
            WIDTH - MARGIN + 4.0 - 90.0,
            MARGIN + 12.0 * n as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart of one metric column of an ablation table.
pub fn ablation_bars_svg(title: &str, table: &AblationTable, column: &str) -> String {
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, column);
    let n = table.rows.len().max(1);
    let slot = (WIDTH - 2.0 * MARGIN) / n as f64;
    for (i, row) in table.rows.iter().enumerate() {
        let x = MARGIN + i as f64 * slot + slot * 0.15;
        let label_x = MARGIN + (i as f64 + 0.5) * slot;
        if let Some(v) = row.metrics.get(column) {
            let top = y_pos(*v);
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                slot * 0.7,
                HEIGHT - MARGIN - top,
                PALETTE[i % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{label_x:.1}" y="{}" text-anchor="middle" font-size="9">{}</text>"#,
            HEIGHT - MARGIN + 15.0,
            escape(&row.label)
        );
    }
    out.push_str("</svg>\n");
    out
}
