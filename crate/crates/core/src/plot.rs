//! Minimal deterministic SVG figure emission.
//!
//! Hand-rolled rather than a plotting crate so the output is plain text,
//! diffable, and byte-identical across reruns of the same data.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryPanel {
    pub label: String,
    /// Each path is one trial's cursor track.
    pub paths: Vec<Vec<(f64, f64)>>,
    pub targets: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(0.01..1000.0).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn data_bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let mut bounds: Option<(f64, f64, f64, f64)> = None;
    for s in series {
        for &(x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            bounds = Some(match bounds {
                None => (x, x, y, y),
                Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
            });
        }
    }
    bounds.map(|(x0, x1, y0, y1)| {
        let xpad = ((x1 - x0) * 0.02).max(1e-9);
        let ypad = ((y1 - y0) * 0.05).max(1e-9);
        (x0 - xpad, x1 + xpad, y0 - ypad, y1 + ypad)
    })
}

fn axes(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let x1 = WIDTH - MARGIN_R;
    let y1 = HEIGHT - MARGIN_B;
    out.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{y1}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        title
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        (MARGIN_L + x1) / 2.0,
        HEIGHT - 12.0,
        x_label
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (MARGIN_T + y1) / 2.0,
        (MARGIN_T + y1) / 2.0,
        y_label
    ));
}

fn svg_open() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    )
}

/// Single-axes line chart of one or more series. Empty input produces
/// empty axes with a warning annotation.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut out = svg_open();
    axes(&mut out, title, x_label, y_label);

    match data_bounds(series) {
        None => {
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" fill=\"#b00\">no data</text>\n",
                WIDTH / 2.0,
                HEIGHT / 2.0
            ));
        }
        Some((x0, x1, y0, y1)) => {
            let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
            let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

            for i in 0..=4 {
                let fx = x0 + (x1 - x0) * i as f64 / 4.0;
                let fy = y0 + (y1 - y0) * i as f64 / 4.0;
                out.push_str(&format!(
                    "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
                    px(fx),
                    HEIGHT - MARGIN_B + 16.0,
                    fmt(fx)
                ));
                out.push_str(&format!(
                    "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
                    MARGIN_L - 6.0,
                    py(fy) + 3.0,
                    fmt(fy)
                ));
            }

            for (si, s) in series.iter().enumerate() {
                let color = PALETTE[si % PALETTE.len()];
                let pts: Vec<String> = s
                    .points
                    .iter()
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                    .collect();
                if pts.len() > 1 {
                    out.push_str(&format!(
                        "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                        pts.join(" "),
                        color
                    ));
                } else if pts.len() == 1 {
                    out.push_str(&format!(
                        "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{}\"/>\n",
                        pts[0].split(',').next().unwrap(),
                        pts[0].split(',').nth(1).unwrap(),
                        color
                    ));
                }
                out.push_str(&format!(
                    "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{}</text>\n",
                    WIDTH - MARGIN_R - 150.0,
                    MARGIN_T + 16.0 * (si as f64 + 1.0),
                    color,
                    s.label
                ));
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Grid of cursor-trajectory panels (one per selected session) with the
/// targets marked.
pub fn trajectory_figure(title: &str, panels: &[TrajectoryPanel]) -> String {
    let cols = panels.len().clamp(1, 4);
    let rows = panels.len().div_ceil(cols);
    let pw = 300.0;
    let ph = 300.0;
    let total_w = cols as f64 * pw;
    let total_h = rows as f64 * ph + 30.0;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w}\" height=\"{total_h}\" viewBox=\"0 0 {total_w} {total_h}\">\n<rect width=\"{total_w}\" height=\"{total_h}\" fill=\"white\"/>\n"
    );
    out.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        total_w / 2.0,
        title
    ));

    // shared bounds across panels so sessions are visually comparable
    let mut b: Option<(f64, f64, f64, f64)> = None;
    for p in panels {
        for path in &p.paths {
            for &(x, y) in path {
                b = Some(match b {
                    None => (x, x, y, y),
                    Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
                });
            }
        }
        for &(x, y) in &p.targets {
            b = Some(match b {
                None => (x, x, y, y),
                Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
            });
        }
    }
    let (x0, x1, y0, y1) = match b {
        Some((x0, x1, y0, y1)) => {
            let px = ((x1 - x0) * 0.05).max(1e-9);
            let py = ((y1 - y0) * 0.05).max(1e-9);
            (x0 - px, x1 + px, y0 - py, y1 + py)
        }
        None => (0.0, 1.0, 0.0, 1.0),
    };

    for (pi, p) in panels.iter().enumerate() {
        let gx = (pi % cols) as f64 * pw;
        let gy = (pi / cols) as f64 * ph + 30.0;
        let inner = 20.0;
        let px = |x: f64| gx + inner + (x - x0) / (x1 - x0) * (pw - 2.0 * inner);
        let py = |y: f64| gy + ph - inner - (y - y0) / (y1 - y0) * (ph - 2.0 * inner);

        out.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#999\"/>\n",
            gx + inner,
            gy + inner,
            pw - 2.0 * inner,
            ph - 2.0 * inner
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            gx + pw / 2.0,
            gy + 14.0,
            p.label
        ));
        for (ti, path) in p.paths.iter().enumerate() {
            let color = PALETTE[ti % PALETTE.len()];
            let pts: Vec<String> = path
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x.clamp(x0, x1)), py(y.clamp(y0, y1))))
                .collect();
            if pts.len() > 1 {
                out.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"0.8\" opacity=\"0.7\"/>\n",
                    pts.join(" "),
                    color
                ));
            }
        }
        for &(tx, ty) in &p.targets {
            out.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\"/>\n",
                px(tx),
                py(ty)
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}
