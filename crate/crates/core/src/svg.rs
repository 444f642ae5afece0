//! Minimal SVG writer for loss curves and per-arm mIoU bars.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str) -> String {
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        "<path d=\"M{MARGIN},{MARGIN} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        HEIGHT - MARGIN,
        WIDTH - MARGIN
    );
    out
}

fn y_labels(out: &mut String, lo: f64, hi: f64) {
    for (v, y) in [(hi, MARGIN), (lo, HEIGHT - MARGIN)] {
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.3}</text>",
            MARGIN - 4.0,
            y + 4.0
        );
    }
}

/// One polyline per named series, sharing the x axis (epoch index).
pub fn line_chart(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let values = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let sx = (WIDTH - 2.0 * MARGIN) / (max_len - 1) as f64;
    let sy = (HEIGHT - 2.0 * MARGIN) / (hi - lo);

    let mut out = open(title);
    y_labels(&mut out, lo, hi);
    for (k, (name, vals)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", MARGIN + i as f64 * sx, HEIGHT - MARGIN - (v - lo) * sy))
            .collect();
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" stroke=\"{color}\" fill=\"none\" stroke-width=\"1.5\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            WIDTH - MARGIN - 150.0,
            MARGIN + 14.0 * k as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bars on a [0, 1] scale.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut out = open(title);
    y_labels(&mut out, 0.0, 1.0);
    let n = bars.len().max(1) as f64;
    let slot = (WIDTH - 2.0 * MARGIN) / n;
    let span = HEIGHT - 2.0 * MARGIN;
    for (k, (name, v)) in bars.iter().enumerate() {
        let h = v.clamp(0.0, 1.0) * span;
        let x = MARGIN + k as f64 * slot + slot * 0.15;
        let _ = writeln!(
            out,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>",
            HEIGHT - MARGIN - h,
            slot * 0.7,
            COLORS[k % COLORS.len()]
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>",
            x + slot * 0.35,
            HEIGHT - MARGIN - h - 4.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"9\">{}</text>",
            x + slot * 0.35,
            HEIGHT - MARGIN + 14.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
