//! Minimal static SVG charts.

use std::fmt::Write as _;

const W: f64 = 720.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// XML comments may not contain `--`.
fn comment(s: &str) -> String {
    format!("<!-- {} -->\n", s.replace("--", "- -"))
}

fn header(title: &str, note: &str) -> String {
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    s.push_str(&comment(note));
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>",
        W / 2.0,
        escape(title)
    );
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn axes(s: &mut String, lo: f64, hi: f64) {
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>", H - PAD);
    for (y, v) in [(H - PAD, lo), (PAD, hi)] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{v:.2}</text>",
            PAD - 4.0,
            y + 3.0
        );
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = PAD + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            W - PAD - 110.0,
            y - 9.0,
            COLORS[i % COLORS.len()],
            W - PAD - 96.0,
            y,
            escape(name)
        );
    }
}

/// One polyline per series over a shared x index.
pub fn line_chart(title: &str, note: &str, series: &[(&str, &[f64])]) -> String {
    let mut s = header(title, note);
    let (lo, hi) = bounds(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    axes(&mut s, lo, hi);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (len.max(2) - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
    for (k, (_, values)) in series.iter().enumerate() {
        let points: Vec<String> = values.iter().enumerate().map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            COLORS[k % COLORS.len()],
            points.join(" ")
        );
    }
    legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Groups of bars: one group per label, one bar per metric.
pub fn grouped_bars(title: &str, note: &str, labels: &[String], metrics: &[(&str, Vec<f64>)]) -> String {
    let mut s = header(title, note);
    let (_, hi) = bounds(metrics.iter().flat_map(|(_, v)| v.iter().copied()).chain([0.0]));
    axes(&mut s, 0.0, hi);
    let group_w = (W - 2.0 * PAD) / labels.len().max(1) as f64;
    let bar_w = group_w * 0.8 / metrics.len().max(1) as f64;
    for (g, label) in labels.iter().enumerate() {
        let gx = PAD + group_w * g as f64 + group_w * 0.1;
        for (m, (_, values)) in metrics.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0.0);
            let h = (H - 2.0 * PAD) * v / hi;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                gx + bar_w * m as f64,
                H - PAD - h,
                bar_w,
                h,
                COLORS[m % COLORS.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
            gx + group_w * 0.4,
            H - PAD + 14.0,
            escape(label)
        );
    }
    legend(&mut s, &metrics.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}
