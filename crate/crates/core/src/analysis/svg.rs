use std::fmt::Write as _;

use super::RdPoint;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const TICKS: usize = 5;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1e-3) };
    (lo - pad, hi + pad)
}

/// Series name of a point: the part of its id before `@`, so that
/// `se@1`, `se@4`, `se@16` share one polyline.
fn series(id: &str) -> &str {
    id.split('@').next().unwrap_or(id)
}

/// Bpp on x, PSNR on y, one polyline per series in bpp order.
pub fn rd_svg(points: &[RdPoint]) -> String {
    let (x0, x1) = bounds(points.iter().map(|p| p.bpp));
    let (y0, y1) = bounds(points.iter().map(|p| p.psnr));
    let px = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |v: f64| HEIGHT - MARGIN - (v - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(
        s,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for i in 0..TICKS {
        let t = i as f64 / (TICKS - 1) as f64;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (x, y) = (px(xv), py(yv));
        writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{bottom}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="middle">{xv:.4}</text>"#,
            bottom + 4.0,
            bottom + 16.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{left}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{yv:.2}</text>"#,
            left - 4.0,
            left - 6.0,
            y + 3.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">bpp</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">PSNR (dB)</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    )
    .unwrap();

    let mut names: Vec<&str> = Vec::new();
    for p in points {
        if !names.contains(&series(&p.model_id)) {
            names.push(series(&p.model_id));
        }
    }
    for (k, name) in names.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts: Vec<&RdPoint> = points.iter().filter(|p| series(&p.model_id) == *name).collect();
        pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        let coords: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.bpp), py(p.psnr))).collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.join(" ")
        )
        .unwrap();
        for p in pts {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(p.bpp),
                py(p.psnr)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{}</text>"#,
            right - 60.0,
            top + 14.0 * (k as f64 + 1.0),
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(id: &str, bpp: f64, psnr: f64) -> RdPoint {
        RdPoint {
            model_id: id.into(),
            lambda: 1.0,
            bpp,
            psnr,
            ms_ssim_proxy: None,
            distortion_loss: 0.0,
        }
    }

    #[test]
    fn one_polyline_per_series() {
        let pts = [point("se@1", 0.03, 20.0), point("se@4", 0.02, 19.0), point("me<1>", 0.03, 21.0)];
        let svg = rd_svg(&pts);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("me&lt;1&gt;"));
    }
}
