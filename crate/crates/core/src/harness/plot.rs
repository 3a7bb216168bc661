//! Static SVG line chart of regret curves.

use std::fmt::Write;

use super::output::Curve;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#7f7f7f"];

/// Round number for axis ticks: 1, 2 or 5 times a power of ten.
fn nice_step(range: f64, target_ticks: usize) -> f64 {
    if !(range > 0.0) {
        return 1.0;
    }
    let raw = range / target_ticks as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let frac = raw / mag;
    let nice = if frac <= 1.0 {
        1.0
    } else if frac <= 2.0 {
        2.0
    } else if frac <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

/// Mean curves with a shaded one-standard-deviation band.
pub fn regret_svg(curves: &[Curve], title: &str) -> String {
    let horizon = curves.iter().map(|c| c.points.len()).max().unwrap_or(0).max(1);
    let y_max =
        curves.iter().flat_map(|c| c.points.iter().map(|(m, s)| m + s)).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let y_step = nice_step(y_max, 5);
    let y_top = (y_max / y_step).ceil().max(1.0) * y_step;
    let x_step = nice_step(horizon as f64, 6);

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |t: f64| MARGIN_LEFT + plot_w * t / horizon as f64;
    let sy = |v: f64| MARGIN_TOP + plot_h * (1.0 - v / y_top);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{title}</text>"#,
        MARGIN_LEFT + plot_w / 2.0
    );

    // Grid and ticks.
    let mut y = 0.0;
    while y <= y_top + 1e-9 * y_top {
        let py = sy(y);
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN_LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            py + 4.0,
            fmt_tick(y)
        );
        y += y_step;
    }
    let mut x = 0.0;
    while x <= horizon as f64 + 1e-9 {
        let px = sx(x);
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + plot_h,
            MARGIN_TOP + plot_h + 5.0,
            MARGIN_TOP + plot_h + 19.0,
            fmt_tick(x)
        );
        x += x_step;
    }
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">round</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">cumulative regret</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = c.points.iter().enumerate().map(|(t, (m, sd))| (t + 1, m + sd));
        let lower = c.points.iter().enumerate().rev().map(|(t, (m, sd))| (t + 1, (m - sd).max(0.0)));
        let band: Vec<String> = upper.chain(lower).map(|(t, v)| format!("{:.2},{:.2}", sx(t as f64), sy(v))).collect();
        let line: Vec<String> =
            c.points.iter().enumerate().map(|(t, (m, _))| format!("{:.2},{:.2}", sx((t + 1) as f64), sy(*m))).collect();
        let _ =
            writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#, band.join(" "));
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = MARGIN_TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 22.0,
            lx + 28.0,
            ly + 4.0,
            c.algorithm
        );
    }
    s.push_str("</svg>\n");
    s
}
