//! Gantt charts: one row per worker, time left to right.

use std::fmt::Write;

use crate::graph::compute_duration;
use crate::types::{CostProfile, Schedule, TaskKind};

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f"];

/// `(start, end)` of every task: simulated times when present, otherwise
/// uniform slots (or sequential positions) with unit forward time.
fn spans(s: &Schedule) -> Vec<Vec<(f64, f64)>> {
    if let Some(t) = &s.timing {
        return t.iter().map(|r| r.iter().map(|i| (i.start, i.end)).collect()).collect();
    }
    let unit = CostProfile { backward_ratio: 1.0, ..CostProfile::default() };
    s.per_worker
        .iter()
        .enumerate()
        .map(|(w, row)| {
            let mut cursor = 0.0;
            row.iter()
                .enumerate()
                .map(|(p, t)| {
                    let (start, dur) = match &s.slots {
                        Some(sl) => (sl[w][p] as f64, if t.kind.is_compute() { 1.0 } else { 0.0 }),
                        None => (cursor, compute_duration(t, s, &unit)),
                    };
                    let end = start + dur;
                    cursor = end;
                    (start, end)
                })
                .collect()
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// SVG Gantt chart: color by pipeline, hatched backwards, time axis.
pub fn gantt_svg(s: &Schedule) -> String {
    let spans = spans(s);
    let end = spans.iter().flatten().map(|x| x.1).fold(0.0, f64::max).max(1.0);
    let (left, top, row_h, scale) = (70.0, 30.0, 28.0, (900.0 / end).clamp(4.0, 60.0));
    let width = left + end * scale + 20.0;
    let height = top + row_h * s.workers() as f64 + 40.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(
        out,
        r#"<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><line x1="0" y1="0" x2="0" y2="6" stroke="white" stroke-width="2" stroke-opacity="0.6"/></pattern></defs>"#
    );
    let title = format!("{} D={} N={} W={}", s.config.scheme, s.config.depth, s.config.micro_batches, s.config.width);
    let _ = writeln!(out, r#"<text x="{left}" y="18">{}</text>"#, escape(&title));
    for (w, (row, sp)) in s.per_worker.iter().zip(&spans).enumerate() {
        let y = top + w as f64 * row_h;
        let _ = writeln!(out, r#"<text x="4" y="{:.1}">P{w}</text>"#, y + row_h * 0.6);
        for (t, &(a, b)) in row.iter().zip(sp) {
            if b <= a {
                continue;
            }
            let x = left + a * scale;
            let wd = (b - a) * scale;
            let color = match t.kind {
                TaskKind::Forward | TaskKind::Backward | TaskKind::Recompute => {
                    PALETTE[t.pipeline_id as usize % PALETTE.len()]
                }
                _ => "#bab0ac",
            };
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{:.1}" width="{wd:.2}" height="{:.1}" fill="{color}" stroke="black" stroke-width="0.5"/>"#,
                y + 2.0,
                row_h - 4.0
            );
            if t.kind == TaskKind::Backward {
                let _ = writeln!(
                    out,
                    r#"<rect x="{x:.2}" y="{:.1}" width="{wd:.2}" height="{:.1}" fill="url(#hatch)"/>"#,
                    y + 2.0,
                    row_h - 4.0
                );
            }
            if t.kind.is_compute() {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.1}" text-anchor="middle" fill="white">{}</text>"#,
                    x + wd / 2.0,
                    y + row_h * 0.62,
                    escape(&t.label())
                );
            }
        }
    }
    let axis_y = top + row_h * s.workers() as f64 + 8.0;
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{axis_y:.1}" x2="{:.2}" y2="{axis_y:.1}" stroke="black"/>"#,
        left + end * scale
    );
    let step = tick_step(end);
    let mut t = 0.0;
    while t <= end + 1e-9 {
        let x = left + t * scale;
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{axis_y:.1}" x2="{x:.2}" y2="{:.1}" stroke="black"/>"#,
            axis_y + 4.0
        );
        let _ =
            writeln!(out, r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{}</text>"#, axis_y + 16.0, fmt_num(t));
        t += step;
    }
    out.push_str("</svg>\n");
    out
}

fn tick_step(end: f64) -> f64 {
    let raw = end / 10.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&s| s >= raw).unwrap_or(mag * 10.0)
}

fn fmt_num(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.2}")
    }
}

/// Text Gantt chart. Each column is the shortest task duration; a task
/// shows its label padded across the columns it spans.
pub fn gantt_ascii(s: &Schedule) -> String {
    let spans = spans(s);
    let res = s
        .per_worker
        .iter()
        .zip(&spans)
        .flat_map(|(r, sp)| r.iter().zip(sp))
        .filter(|(t, _)| t.kind.is_compute())
        .map(|(_, &(a, b))| b - a)
        .filter(|&d| d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let res = if res.is_finite() { res } else { 1.0 };
    let cell = s.tasks().map(|t| t.label().len()).max().unwrap_or(2).max(2) + 1;
    let mut out = String::new();
    for (w, (row, sp)) in s.per_worker.iter().zip(&spans).enumerate() {
        let mut line = String::new();
        let mut col = 0usize;
        for (t, &(a, b)) in row.iter().zip(sp) {
            if !t.kind.is_compute() {
                continue;
            }
            let c0 = (a / res).round() as usize;
            let c1 = ((b / res).round() as usize).max(c0 + 1);
            while col < c0 {
                line.push_str(&format!("{:<cell$}", "."));
                col += 1;
            }
            let width = (c1 - c0) * cell;
            line.push_str(&format!("{:<width$}", t.label()));
            col = c1;
        }
        let _ = writeln!(out, "P{w}: {}", line.trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedgen::gen_schedule;
    use crate::types::{PipelineConfig, Scheme};

    #[test]
    fn ascii_gpipe_grid() {
        let s = gen_schedule(&PipelineConfig::new(Scheme::GPipe, 4, 4)).unwrap();
        let a = gantt_ascii(&s);
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines[0], "P0: F0 F1 F2 F3 .  .  .  .  .  .  B0 B1 B2 B3");
        assert_eq!(lines[3], "P3: .  .  .  F0 F1 F2 F3 B0 B1 B2 B3");
    }

    #[test]
    fn svg_has_rows_and_hatching() {
        let s = gen_schedule(&PipelineConfig::new(Scheme::Chimera, 4, 4)).unwrap();
        let svg = gantt_svg(&s);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("fill=\"url(#hatch)\"").count(), 16);
        for w in 0..4 {
            assert!(svg.contains(&format!(">P{w}<")));
        }
    }
}
