use std::fmt::Write;

use gase::instances::{Solution, VrpInstance};

const SIZE: f64 = 600.0;
const MARGIN: f64 = 30.0;

/// Route colour `i`, hues spaced by the golden angle so neighbours differ.
pub fn route_colour(i: usize) -> String {
    let hue = (i as f64 * 137.507_764) % 360.0;
    format!("hsl({hue:.1},70%,42%)")
}

/// One polyline per route, a circle per customer and a square depot.
pub fn render(inst: &VrpInstance, sol: &Solution) -> String {
    let pts = inst.raw_coords().unwrap_or(inst.coords());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let xy = |i: usize| (MARGIN + (pts[i][0] - lo[0]) * scale, SIZE - MARGIN - (pts[i][1] - lo[1]) * scale);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (r, route) in sol.routes().iter().enumerate() {
        let mut points = String::new();
        for &node in std::iter::once(&0).chain(route.iter()).chain(std::iter::once(&0)) {
            let (x, y) = xy(node);
            let _ = write!(points, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(
            s,
            r#"<polyline class="route" data-route="{}" points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            r + 1,
            points.trim_end(),
            route_colour(r)
        );
    }
    for i in 1..inst.n_nodes() {
        let (x, y) = xy(i);
        let _ = writeln!(s, r#"<circle class="customer" cx="{x:.2}" cy="{y:.2}" r="3" fill="black"/>"#);
    }
    let (x, y) = xy(0);
    let _ = writeln!(
        s,
        r#"<rect class="depot" x="{:.2}" y="{:.2}" width="10" height="10" fill="red" stroke="black"/>"#,
        x - 5.0,
        y - 5.0
    );
    s.push_str("</svg>\n");
    s
}
