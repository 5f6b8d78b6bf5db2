//! Built-in stroke glyphs.
//!
//! Coordinates are in em units: `x` grows rightwards from the glyph origin,
//! `y` grows downwards with the cap line at 0 and the baseline at 1.

use std::f64::consts::PI;

pub type Stroke = Vec<(f64, f64)>;

pub struct Glyph {
    pub advance: f64,
    pub strokes: Vec<Stroke>,
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Stroke {
    let n = 24;
    (0..=n)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / n as f64) * PI / 180.0;
            (cx + rx * t.cos(), cy - ry * t.sin())
        })
        .collect()
}

fn line(points: &[(f64, f64)]) -> Stroke {
    points.to_vec()
}

/// Tokens with a built-in glyph. `\frac` and `\sqrt` are drawn by the layout.
pub const GLYPH_TOKENS: &[&str] = &[
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "a", "b", "c", "d", "x", "y", "z", "n", "k", "t",
    "+", "-", "=", "(", ")", "\\sum", "\\int",
];

pub fn glyph(token: &str) -> Option<Glyph> {
    let (advance, strokes) = match token {
        "0" => (0.6, vec![ellipse(0.3, 0.5, 0.24, 0.48, 0.0, 360.0)]),
        "1" => (0.45, vec![line(&[(0.1, 0.25), (0.3, 0.02), (0.3, 1.0)])]),
        "2" => (
            0.6,
            vec![line(&[(0.08, 0.25), (0.2, 0.06), (0.4, 0.03), (0.53, 0.2), (0.5, 0.42), (0.08, 1.0), (0.56, 1.0)])],
        ),
        "3" => (
            0.6,
            vec![
                line(&[(0.08, 0.12), (0.3, 0.0), (0.5, 0.14), (0.46, 0.38), (0.24, 0.48)]),
                line(&[(0.24, 0.48), (0.5, 0.6), (0.53, 0.85), (0.3, 1.0), (0.06, 0.9)]),
            ],
        ),
        "4" => (0.62, vec![line(&[(0.44, 1.0), (0.44, 0.02), (0.05, 0.7), (0.58, 0.7)])]),
        "5" => (
            0.6,
            vec![line(&[(0.52, 0.03), (0.13, 0.03), (0.1, 0.45), (0.35, 0.4), (0.52, 0.55), (0.5, 0.86), (0.3, 1.0), (0.07, 0.92)])],
        ),
        "6" => (
            0.6,
            vec![line(&[(0.5, 0.06), (0.3, 0.02), (0.12, 0.28), (0.1, 0.72), (0.26, 1.0), (0.46, 0.95), (0.53, 0.72), (0.42, 0.52), (0.2, 0.52), (0.1, 0.7)])],
        ),
        "7" => (0.6, vec![line(&[(0.05, 0.03), (0.56, 0.03), (0.24, 1.0)])]),
        "8" => (
            0.6,
            vec![ellipse(0.3, 0.25, 0.19, 0.23, 0.0, 360.0), ellipse(0.3, 0.74, 0.24, 0.26, 0.0, 360.0)],
        ),
        "9" => (
            0.6,
            vec![ellipse(0.3, 0.28, 0.22, 0.26, 0.0, 360.0), line(&[(0.52, 0.28), (0.46, 1.0)])],
        ),
        "a" => (
            0.58,
            vec![ellipse(0.27, 0.73, 0.2, 0.27, 0.0, 360.0), line(&[(0.47, 0.45), (0.47, 1.0)])],
        ),
        "b" => (
            0.58,
            vec![line(&[(0.1, 0.0), (0.1, 1.0)]), ellipse(0.3, 0.73, 0.2, 0.27, 0.0, 360.0)],
        ),
        "c" => (0.52, vec![ellipse(0.28, 0.73, 0.22, 0.27, 45.0, 315.0)]),
        "d" => (
            0.58,
            vec![ellipse(0.27, 0.73, 0.2, 0.27, 0.0, 360.0), line(&[(0.47, 0.0), (0.47, 1.0)])],
        ),
        "x" => (
            0.56,
            vec![line(&[(0.05, 0.45), (0.5, 1.0)]), line(&[(0.5, 0.45), (0.05, 1.0)])],
        ),
        "y" => (
            0.56,
            vec![line(&[(0.05, 0.45), (0.28, 0.86)]), line(&[(0.5, 0.45), (0.14, 1.3)])],
        ),
        "z" => (0.56, vec![line(&[(0.05, 0.45), (0.5, 0.45), (0.05, 1.0), (0.5, 1.0)])]),
        "n" => (
            0.56,
            vec![
                line(&[(0.08, 0.45), (0.08, 1.0)]),
                line(&[(0.08, 0.6), (0.25, 0.45), (0.42, 0.5), (0.46, 0.65), (0.46, 1.0)]),
            ],
        ),
        "k" => (
            0.54,
            vec![line(&[(0.08, 0.0), (0.08, 1.0)]), line(&[(0.46, 0.45), (0.08, 0.76), (0.46, 1.0)])],
        ),
        "t" => (
            0.5,
            vec![
                line(&[(0.22, 0.1), (0.22, 0.9), (0.32, 1.0), (0.44, 0.95)]),
                line(&[(0.04, 0.42), (0.44, 0.42)]),
            ],
        ),
        "+" => (
            0.62,
            vec![line(&[(0.05, 0.62), (0.57, 0.62)]), line(&[(0.31, 0.36), (0.31, 0.88)])],
        ),
        "-" => (0.56, vec![line(&[(0.05, 0.62), (0.51, 0.62)])]),
        "=" => (
            0.6,
            vec![line(&[(0.05, 0.5), (0.55, 0.5)]), line(&[(0.05, 0.74), (0.55, 0.74)])],
        ),
        "(" => (0.36, vec![line(&[(0.3, -0.05), (0.13, 0.28), (0.1, 0.6), (0.15, 0.95), (0.3, 1.22)])]),
        ")" => (0.36, vec![line(&[(0.06, -0.05), (0.23, 0.28), (0.26, 0.6), (0.21, 0.95), (0.06, 1.22)])]),
        "\\sum" => (
            0.72,
            vec![line(&[(0.66, 0.08), (0.62, -0.1), (0.05, -0.1), (0.38, 0.45), (0.05, 1.1), (0.62, 1.1), (0.66, 0.92)])],
        ),
        "\\int" => (
            0.5,
            vec![line(&[(0.46, -0.12), (0.38, -0.2), (0.3, -0.1), (0.2, 1.15), (0.12, 1.3), (0.04, 1.22)])],
        ),
        _ => return None,
    };
    Some(Glyph { advance, strokes })
}
