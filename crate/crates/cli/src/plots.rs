//! Plain-text SVG charts. Data points carry their values in `data-*`
//! attributes; each plot area records its axis domains and pixel ranges so
//! coordinates can be mapped back.

use std::fmt::Write as _;

use adafgrad_core::report::RunReport;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Linear map from a data domain onto the plot area.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px_x(&self) -> (f64, f64) {
        (LEFT, WIDTH - RIGHT)
    }

    fn px_y(&self) -> (f64, f64) {
        (HEIGHT - BOTTOM, TOP)
    }

    fn sx(&self, v: f64) -> f64 {
        let (a, b) = self.px_x();
        a + (v - self.x.0) / (self.x.1 - self.x.0) * (b - a)
    }

    fn sy(&self, v: f64) -> f64 {
        let (a, b) = self.px_y();
        a + (v - self.y.0) / (self.y.1 - self.y.0) * (b - a)
    }

    fn open(&self, svg: &mut String, title: &str, x_label: &str, y_label: &str) {
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            (LEFT + WIDTH - RIGHT) / 2.0,
            escape(title)
        );
        let (x0, x1) = self.px_x();
        let (y0, y1) = self.px_y();
        let _ = writeln!(
            svg,
            r#"<g class="axes" stroke="black"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let vy = self.y.0 + f * (self.y.1 - self.y.0);
            let py = self.sy(vy);
            let _ = writeln!(
                svg,
                r##"<line x1="{}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{vy:.2}</text><line x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="#ddd"/>"##,
                x0 - 5.0,
                x0 - 8.0,
                py + 4.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 15.0,
            escape(x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
    }

    fn x_tick(&self, svg: &mut String, v: f64, label: &str) {
        let px = self.sx(v);
        let y0 = self.px_y().0;
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
            y0 + 5.0,
            y0 + 18.0,
            escape(label)
        );
    }

    fn plot_group(&self, svg: &mut String, class: &str) {
        let (px0, px1) = self.px_x();
        let (py0, py1) = self.px_y();
        let _ = writeln!(
            svg,
            r#"<g class="{class}" data-x0="{}" data-x1="{}" data-px0="{px0}" data-px1="{px1}" data-y0="{}" data-y1="{}" data-py0="{py0}" data-py1="{py1}">"#,
            self.x.0, self.x.1, self.y.0, self.y.1
        );
    }
}

fn legend(svg: &mut String, labels: &[(String, &'static str)]) {
    let x = WIDTH - RIGHT + 15.0;
    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (i, (label, c)) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{c}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            x + 18.0,
            y,
            escape(label)
        );
    }
    let _ = writeln!(svg, "</g>");
}

fn close(mut svg: String) -> String {
    svg.push_str("</svg>\n");
    svg
}

/// Accuracy on every task after each training stage, one line per
/// (run, task). Joint runs have no stages and are listed but not drawn.
pub fn accuracy_curves(runs: &[(String, RunReport)]) -> String {
    let n = runs[0].1.n_tasks();
    let frame = Frame {
        x: (0.5, n as f64 + 0.5),
        y: (0.0, 1.0),
    };
    let mut svg = String::new();
    frame.open(&mut svg, "Per-task accuracy across the sequence", "tasks trained", "accuracy");
    for t in 1..=n {
        frame.x_tick(&mut svg, t as f64, &t.to_string());
    }
    frame.plot_group(&mut svg, "curves");
    let mut labels = Vec::new();
    for (r, (label, report)) in runs.iter().enumerate() {
        let c = color(r);
        let Some(m) = &report.acc_matrix else {
            labels.push((format!("{label} (joint, no curve)"), c));
            continue;
        };
        labels.push((label.clone(), c));
        for task in 0..n {
            let pts: Vec<(f64, f64)> = (task..n).map(|t| ((t + 1) as f64, m.acc[t][task])).collect();
            let path: Vec<String> = pts
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", frame.sx(x), frame.sy(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="curve" data-run="{}" data-task="{task}" points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#,
                escape(label),
                path.join(" ")
            );
            for (x, y) in pts {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{c}" data-run="{}" data-task="{task}" data-acc="{y}"/>"#,
                    frame.sx(x),
                    frame.sy(y),
                    escape(label)
                );
            }
        }
    }
    svg.push_str("</g>\n");
    legend(&mut svg, &labels);
    close(svg)
}

/// Final ACC against forgetting, one point per sequential run.
pub fn acc_vs_fgt(runs: &[(String, RunReport)]) -> String {
    let points: Vec<(usize, &str, f64, f64)> = runs
        .iter()
        .enumerate()
        .filter_map(|(i, (l, r))| r.metrics.fgt.map(|f| (i, l.as_str(), f, r.metrics.acc)))
        .collect();
    let max_fgt = points.iter().map(|p| p.2).fold(0.0, f64::max);
    let min_fgt = points.iter().map(|p| p.2).fold(0.0, f64::min);
    let frame = Frame {
        x: (min_fgt, (max_fgt * 1.1).max(min_fgt + 0.1)),
        y: (0.0, 1.0),
    };
    let mut svg = String::new();
    frame.open(&mut svg, "Accuracy / forgetting trade-off", "FGT (lower is better)", "ACC");
    for i in 0..=4 {
        let v = frame.x.0 + i as f64 / 4.0 * (frame.x.1 - frame.x.0);
        frame.x_tick(&mut svg, v, &format!("{v:.2}"));
    }
    frame.plot_group(&mut svg, "scatter");
    let mut labels = Vec::new();
    for (i, label, fgt, acc) in points {
        let c = color(i);
        labels.push((label.to_string(), c));
        let (cx, cy) = (frame.sx(fgt), frame.sy(acc));
        let _ = writeln!(
            svg,
            r#"<circle class="point" cx="{cx}" cy="{cy}" r="5" fill="{c}" data-run="{}" data-fgt="{fgt}" data-acc="{acc}"/>"#,
            escape(label)
        );
    }
    svg.push_str("</g>\n");
    legend(&mut svg, &labels);
    close(svg)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Box summaries of the probability given to the true class, grouped by
/// task, one box per run.
pub fn confidence_boxes(runs: &[(String, RunReport)]) -> String {
    let n = runs[0].1.n_tasks();
    let frame = Frame {
        x: (0.5, n as f64 + 0.5),
        y: (0.0, 1.0),
    };
    let mut svg = String::new();
    frame.open(&mut svg, "Target-class confidence per task", "task", "p(true class)");
    for t in 1..=n {
        frame.x_tick(&mut svg, t as f64, &t.to_string());
    }
    frame.plot_group(&mut svg, "boxes");
    let slot = (frame.sx(1.0) - frame.sx(0.0)) * 0.8 / runs.len() as f64;
    let mut labels = Vec::new();
    for (r, (label, report)) in runs.iter().enumerate() {
        let c = color(r);
        labels.push((label.clone(), c));
        for (task, values) in report.target_confidence.iter().enumerate() {
            if values.is_empty() {
                continue;
            }
            let mut v = values.clone();
            v.sort_by(f64::total_cmp);
            let [lo, q1, med, q3, hi] = [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&v, q));
            let left = frame.sx((task + 1) as f64) - 0.4 * (frame.sx(1.0) - frame.sx(0.0)) + slot * r as f64;
            let mid = left + slot / 2.0;
            let _ = writeln!(
                svg,
                r#"<g class="box" data-run="{}" data-task="{task}" data-min="{lo}" data-q1="{q1}" data-median="{med}" data-q3="{q3}" data-max="{hi}">"#,
                escape(label)
            );
            let _ = writeln!(
                svg,
                r#"<line x1="{mid:.2}" y1="{:.2}" x2="{mid:.2}" y2="{:.2}" stroke="{c}"/>"#,
                frame.sy(lo),
                frame.sy(hi)
            );
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{c}" fill-opacity="0.35" stroke="{c}"/>"#,
                left + slot * 0.1,
                frame.sy(q3),
                slot * 0.8,
                (frame.sy(q1) - frame.sy(q3)).max(0.5)
            );
            let _ = writeln!(
                svg,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#,
                left + slot * 0.1,
                frame.sy(med),
                left + slot * 0.9,
                frame.sy(med)
            );
            svg.push_str("</g>\n");
        }
    }
    svg.push_str("</g>\n");
    legend(&mut svg, &labels);
    close(svg)
}
