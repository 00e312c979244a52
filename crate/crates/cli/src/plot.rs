//! Progress curves as standalone SVG and CSV.

use std::fmt::Write;

/// One predicted series drawn against the ground truth.
#[derive(Clone, Debug)]
pub struct Curve {
    pub name: String,
    pub values: Vec<f64>,
}

const PALETTE: [&str; 6] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Columns `frame,ground_truth,<curve names>`, one row per frame.
pub fn to_csv(frames: &[usize], truth: &[f64], curves: &[Curve]) -> String {
    let mut out = String::from("frame,ground_truth");
    for c in curves {
        out.push(',');
        out.push_str(&c.name);
    }
    out.push('\n');
    for (i, (&f, &g)) in frames.iter().zip(truth).enumerate() {
        write!(out, "{f},{g:?}").unwrap();
        for c in curves {
            write!(out, ",{:?}", c.values[i]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn to_svg(title: &str, frames: &[usize], truth: &[f64], curves: &[Curve]) -> String {
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let span = frames.len().saturating_sub(1).max(1) as f64;
    let x = |i: usize| LEFT + pw * i as f64 / span;
    let y = |p: f64| TOP + ph * (1.0 - p.clamp(0.0, 1.0));
    let points = |vals: &[f64]| {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut s = String::new();
    writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    )
    .unwrap();
    for k in 0..=4 {
        let p = k as f64 / 4.0;
        writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>
<text x="{:.1}" y="{:.2}" text-anchor="end">{p:.2}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y(p) + 4.0,
            y = y(p)
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>
<text x="{LEFT}" y="{:.1}" text-anchor="start">{}</text>
<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>
<text x="{:.1}" y="{:.1}" text-anchor="middle">frame</text>
<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">progress</text>"##,
        TOP + ph + 16.0,
        frames.first().copied().unwrap_or(0),
        LEFT + pw,
        TOP + ph + 16.0,
        frames.last().copied().unwrap_or(0),
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
    )
    .unwrap();

    let mut legend = vec![("ground truth".to_string(), "black", true)];
    writeln!(
        s,
        r#"<polyline fill="none" stroke="black" stroke-width="1.5" stroke-dasharray="5,3" points="{}"/>"#,
        points(truth)
    )
    .unwrap();
    for (k, c) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points(&c.values)
        )
        .unwrap();
        legend.push((c.name.clone(), color, false));
    }
    for (k, (name, color, dashed)) in legend.iter().enumerate() {
        let ly = TOP + 12.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 12.0;
        let dash = if *dashed {
            r#" stroke-dasharray="5,3""#
        } else {
            ""
        };
        writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="1.5"{dash}/>
<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
