//! SVG Gantt rendering: one row per machine, one rectangle per operation,
//! time on the x axis. Rectangles carry `data-start`/`data-end` attributes
//! so tests (and tooling) can read the schedule back out of the chart.

use jobshop_core::env::Schedule;
use std::fmt::Write;

const ROW_H: i64 = 28;
const ROW_GAP: i64 = 8;
const MARGIN_LEFT: i64 = 70;
const MARGIN_TOP: i64 = 20;
const MARGIN_BOTTOM: i64 = 30;
const CHART_W: f64 = 900.0;

pub fn render(sched: &Schedule) -> String {
    let machines = sched.num_machines.max(1);
    let span = sched.makespan.max(1) as f64;
    let px = CHART_W / span;
    let height = MARGIN_TOP + machines as i64 * (ROW_H + ROW_GAP) + MARGIN_BOTTOM;
    let width = MARGIN_LEFT + CHART_W as i64 + 40;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{MARGIN_LEFT}" y="14">{} — makespan {}</text>"#,
        escape(&sched.instance_id),
        sched.makespan
    )
    .unwrap();
    // axes: one horizontal baseline per machine row plus the time axis
    for m in 0..machines {
        let y = MARGIN_TOP + m as i64 * (ROW_H + ROW_GAP);
        writeln!(
            svg,
            r#"<text x="4" y="{}" class="machine-label">M{m}</text>"#,
            y + ROW_H / 2 + 4
        )
        .unwrap();
        writeln!(
            svg,
            r##"<line x1="{MARGIN_LEFT}" y1="{}" x2="{}" y2="{}" stroke="#ccc"/>"##,
            y + ROW_H,
            MARGIN_LEFT + CHART_W as i64,
            y + ROW_H
        )
        .unwrap();
    }
    let axis_y = MARGIN_TOP + machines as i64 * (ROW_H + ROW_GAP) + 4;
    writeln!(
        svg,
        r##"<line x1="{MARGIN_LEFT}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="#333"/>"##,
        MARGIN_LEFT + CHART_W as i64
    )
    .unwrap();
    writeln!(svg, r#"<text x="{MARGIN_LEFT}" y="{}">0</text>"#, axis_y + 16).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        MARGIN_LEFT + CHART_W as i64,
        axis_y + 16,
        sched.makespan
    )
    .unwrap();

    for e in &sched.entries {
        let x = MARGIN_LEFT as f64 + e.start as f64 * px;
        let w = (e.end - e.start) as f64 * px;
        let y = MARGIN_TOP + e.machine as i64 * (ROW_H + ROW_GAP);
        let hue = (e.op.job * 47) % 360;
        writeln!(
            svg,
            r##"<rect x="{x:.2}" y="{y}" width="{w:.2}" height="{ROW_H}" fill="hsl({hue},65%,60%)" stroke="#333" data-op="{}" data-start="{}" data-end="{}"/>"##,
            e.op, e.start, e.end
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x + w / 2.0,
            y + ROW_H / 2 + 4,
            e.op
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
