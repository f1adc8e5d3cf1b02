//! Standalone SVG rendering of mazes and state sequences.

use std::fmt::Write as _;

use crate::maze::{Cell, EnvState, MazeSpec};

/// Pixels per world unit.
const SCALE: f64 = 24.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// The `i`-th colour of a fixed cyclic palette.
pub fn palette(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub points: Vec<EnvState>,
    pub color: String,
    /// Marks the first and last point.
    pub endpoints: bool,
}

impl Polyline {
    pub fn new(points: Vec<EnvState>, color: impl Into<String>) -> Self {
        Self {
            points,
            color: color.into(),
            endpoints: true,
        }
    }
}

/// The maze with every polyline drawn over it, in order.
pub fn render(spec: &MazeSpec, lines: &[Polyline]) -> String {
    let unit = spec.cell_size() * SCALE;
    let (w, h) = (spec.width() as f64 * unit, spec.height() as f64 * unit);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    for y in 0..spec.height() {
        for x in 0..spec.width() {
            if !spec.is_free(Cell::new(x, y)) {
                let _ = writeln!(
                    out,
                    r##"<rect x="{}" y="{}" width="{unit}" height="{unit}" fill="#404040"/>"##,
                    x as f64 * unit,
                    y as f64 * unit
                );
            }
        }
    }
    for line in lines {
        if line.points.is_empty() {
            continue;
        }
        let pts: Vec<String> = line
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", p.x * SCALE, p.y * SCALE))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2" stroke-opacity="0.8"/>"#,
            pts.join(" "),
            line.color
        );
        if line.endpoints {
            let (a, b) = (line.points[0], line.points[line.points.len() - 1]);
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}"/>"#,
                a.x * SCALE,
                a.y * SCALE,
                line.color
            );
            let _ = writeln!(
                out,
                r##"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="{}" stroke="#000000"/>"##,
                b.x * SCALE - 4.0,
                b.y * SCALE - 4.0,
                line.color
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walls_and_lines_are_drawn() {
        let spec = MazeSpec::open(4, 3).unwrap();
        let line = Polyline::new(vec![spec.center(Cell::new(1, 1)), spec.center(Cell::new(2, 1))], palette(0));
        let svg = render(&spec, &[line]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        // 12 cells, 2 free; plus background and end marker
        assert_eq!(svg.matches("<rect").count(), 10 + 1 + 1);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("36.00,36.00 60.00,36.00"));
        assert_eq!(render(&spec, &[]), render(&spec, &[]));
    }

    #[test]
    fn palette_cycles() {
        assert_eq!(palette(0), palette(8));
        assert_ne!(palette(0), palette(1));
    }
}
