//! Top-down SVG overlays of trajectories on the x-z plane.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::evaluation::Trajectory;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;
const LEGEND_ROW: f64 = 18.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders labelled trajectories with equal scaling on both axes. World `x`
/// maps to the right and world `z` upward.
pub fn plot_svg(trajectories: &[(&str, &Trajectory)]) -> Result<String> {
    if trajectories.is_empty() || trajectories.iter().any(|(_, t)| t.is_empty()) {
        return Err(Error::EmptyTrajectory);
    }
    let pts = trajectories
        .iter()
        .flat_map(|(_, t)| t.poses().iter().map(|p| (p.translation.x, p.translation.z)));
    let (mut x0, mut x1, mut z0, mut z1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, z) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        z0 = z0.min(z);
        z1 = z1.max(z);
    }
    let legend_h = LEGEND_ROW * trajectories.len() as f64;
    let avail_w = WIDTH - 2.0 * MARGIN;
    let avail_h = HEIGHT - 2.0 * MARGIN - legend_h;
    let span = (x1 - x0).max(z1 - z0).max(1e-9);
    let scale = (avail_w / span).min(avail_h / span);
    // center the extent inside the drawing area
    let ox = MARGIN + (avail_w - (x1 - x0) * scale) / 2.0;
    let oy = MARGIN + legend_h + (avail_h - (z1 - z0) * scale) / 2.0;
    let to_svg = |x: f64, z: f64| (ox + (x - x0) * scale, oy + (z1 - z) * scale);

    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    )
    .expect("string write");
    writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>").expect("string write");
    for (i, (label, traj)) in trajectories.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = traj
            .poses()
            .iter()
            .map(|p| {
                let (sx, sy) = to_svg(p.translation.x, p.translation.z);
                format!("{sx:.3},{sy:.3}")
            })
            .collect();
        writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            points.join(" ")
        )
        .expect("string write");
        let ly = MARGIN + LEGEND_ROW * i as f64;
        writeln!(
            s,
            "<line x1=\"{MARGIN}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"3\"/>",
            MARGIN + 24.0
        )
        .expect("string write");
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            MARGIN + 30.0,
            ly + 4.0,
            escape(label)
        )
        .expect("string write");
    }
    writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">x right, z up; 1 unit = {scale:.3} px</text>",
        WIDTH - MARGIN,
        HEIGHT - 12.0
    )
    .expect("string write");
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg(path: impl AsRef<std::path::Path>, trajectories: &[(&str, &Trajectory)]) -> Result<()> {
    std::fs::write(path, plot_svg(trajectories)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Motion, Rotation};
    use nalgebra::Vector3;

    fn line(n: usize, dz: f64) -> Trajectory {
        Trajectory::from_poses(
            (0..n)
                .map(|i| Motion::new(Rotation::identity(), Vector3::new(i as f64, 0.0, i as f64 * dz)))
                .collect(),
        )
        .unwrap()
    }

    fn polyline_xs(svg: &str) -> Vec<Vec<f64>> {
        svg.lines()
            .filter(|l| l.starts_with("<polyline"))
            .map(|l| {
                let pts = l.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
                pts.split(' ').map(|p| p.split(',').next().unwrap().parse().unwrap()).collect()
            })
            .collect()
    }

    #[test]
    fn straight_line_gives_one_monotone_polyline() {
        let svg = plot_svg(&[("est", &line(6, 0.0))]).unwrap();
        let xs = polyline_xs(&svg);
        assert_eq!(xs.len(), 1);
        assert!(xs[0].windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn two_trajectories_two_entries() {
        let (a, b) = (line(5, 0.5), line(5, -0.5));
        let svg = plot_svg(&[("estimate", &a), ("ground <truth>", &b)]).unwrap();
        assert_eq!(polyline_xs(&svg).len(), 2);
        assert_eq!(svg.matches("<text").count(), 3);
        assert!(svg.contains("ground &lt;truth&gt;"));
        assert_eq!(svg, plot_svg(&[("estimate", &a), ("ground <truth>", &b)]).unwrap());
    }

    #[test]
    fn equal_axis_scaling() {
        let svg = plot_svg(&[("diag", &line(3, 1.0))]).unwrap();
        let l = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts: Vec<(f64, f64)> = l
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap()
            .split(' ')
            .map(|p| {
                let mut it = p.split(',').map(|v| v.parse::<f64>().unwrap());
                (it.next().unwrap(), it.next().unwrap())
            })
            .collect();
        let dx = pts[2].0 - pts[0].0;
        let dy = pts[0].1 - pts[2].1;
        assert!((dx - dy).abs() < 1e-2);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(plot_svg(&[]), Err(Error::EmptyTrajectory)));
    }
}
