//! Static SVG charts: step survival curves and grouped bars.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str) -> String {
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        escape(title)
    );
    out
}

fn axes(out: &mut String, x_label: &str, y_label: &str, y_max: f64) {
    let (x0, y0, x1, y1) = (LEFT, HEIGHT - BOTTOM, WIDTH - RIGHT, TOP);
    let _ = writeln!(
        out,
        "<path d=\"M{x0},{y1} V{y0} H{x1}\" fill=\"none\" stroke=\"black\"/>"
    );
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>",
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let x = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            out,
            "<rect x=\"{x}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/>",
            y - 10.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(out, "<text x=\"{}\" y=\"{y}\">{}</text>", x + 18.0, escape(name));
    }
}

/// Right-continuous step curves on `[0, 1]`, each given as
/// `(name, [(time, value)])` with the value holding from `time` on.
pub fn step_curves_svg(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let t_max = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let sx = |t: f64| LEFT + (WIDTH - LEFT - RIGHT) * t / t_max;
    let sy = |v: f64| HEIGHT - BOTTOM - (HEIGHT - BOTTOM - TOP) * v.clamp(0.0, 1.0);
    let mut out = open(title);
    axes(&mut out, x_label, "survival", 1.0);
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t_max:.3}</text>",
        WIDTH - RIGHT,
        HEIGHT - BOTTOM + 16.0
    );
    for (i, (_, pts)) in series.iter().enumerate() {
        let mut d = format!("M{:.2},{:.2}", sx(0.0), sy(1.0));
        for &(t, v) in pts {
            let _ = write!(d, " H{:.2} V{:.2}", sx(t), sy(v));
        }
        let _ = write!(d, " H{:.2}", sx(t_max));
        let _ = writeln!(
            out,
            "<path d=\"{d}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            PALETTE[i % PALETTE.len()]
        );
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// One group of bars per category, one bar per series, with optional
/// error whiskers. Non-finite values are left out.
pub fn grouped_bars_svg(
    title: &str,
    y_label: &str,
    categories: &[String],
    series: &[(String, Vec<f64>, Vec<f64>)],
) -> String {
    let y_max = series
        .iter()
        .flat_map(|(_, v, e)| v.iter().zip(e).map(|(a, b)| a + b.max(0.0)))
        .filter(|x| x.is_finite())
        .fold(0.0, f64::max)
        .max(1e-12)
        * 1.1;
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - BOTTOM - TOP;
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = 0.8 * group_w / series.len().max(1) as f64;
    let sy = |v: f64| HEIGHT - BOTTOM - plot_h * v / y_max;

    let mut out = open(title);
    axes(&mut out, "", y_label, y_max);
    for (c, cat) in categories.iter().enumerate() {
        let gx = LEFT + group_w * c as f64;
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            gx + group_w / 2.0,
            HEIGHT - BOTTOM + 16.0,
            escape(cat)
        );
        for (s, (_, values, errors)) in series.iter().enumerate() {
            let v = values.get(c).copied().unwrap_or(f64::NAN);
            if !v.is_finite() {
                continue;
            }
            let x = gx + 0.1 * group_w + bar_w * s as f64;
            let _ = writeln!(
                out,
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{bar_w:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                sy(v),
                (HEIGHT - BOTTOM - sy(v)).max(0.0),
                PALETTE[s % PALETTE.len()]
            );
            let e = errors.get(c).copied().unwrap_or(0.0);
            if e.is_finite() && e > 0.0 {
                let cx = x + bar_w / 2.0;
                let _ = writeln!(
                    out,
                    "<path d=\"M{cx:.2},{:.2} V{:.2}\" stroke=\"black\"/>",
                    sy(v + e),
                    sy((v - e).max(0.0))
                );
            }
        }
    }
    let names: Vec<&str> = series.iter().map(|(n, _, _)| n.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}
