//! Box layout of markup and anti-aliased stroke rasterisation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::glyphs::{glyph, Stroke};
use super::Raster;
use crate::{Error, Result};

/// Per-glyph random distortion, as fractions of the glyph size.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlyphJitter {
    pub scale: f64,
    pub rotation_deg: f64,
    pub baseline: f64,
}

impl Default for GlyphJitter {
    fn default() -> Self {
        Self { scale: 0.1, rotation_deg: 6.0, baseline: 0.05 }
    }
}

impl GlyphJitter {
    pub fn none() -> Self {
        Self { scale: 0.0, rotation_deg: 0.0, baseline: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Glyph(String),
    Row(Vec<Node>),
    Scripts { base: Box<Node>, sup: Option<Box<Node>>, sub: Option<Box<Node>> },
    Frac(Box<Node>, Box<Node>),
    Sqrt(Box<Node>),
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedSequence(msg.into())
}

struct Parser<'a> {
    tokens: &'a [&'a str],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<&str> {
        let t = self.tokens.get(self.pos).copied();
        self.pos += 1;
        t
    }

    fn row(&mut self, closed: bool) -> Result<Node> {
        let mut items: Vec<Node> = Vec::new();
        loop {
            match self.peek() {
                None if closed => return Err(malformed("unclosed group")),
                None => break,
                Some("}") if closed => {
                    self.pos += 1;
                    break;
                }
                Some("}") => return Err(malformed(format!("unbalanced '}}' at position {}", self.pos))),
                Some(s @ ("^" | "_")) => {
                    let is_sup = s == "^";
                    self.pos += 1;
                    let arg = Box::new(self.argument()?);
                    let base = items.pop().unwrap_or(Node::Row(Vec::new()));
                    let node = match base {
                        Node::Scripts { base, sup: None, sub } if is_sup => {
                            Node::Scripts { base, sup: Some(arg), sub }
                        }
                        Node::Scripts { base, sup, sub: None } if !is_sup => {
                            Node::Scripts { base, sup, sub: Some(arg) }
                        }
                        other if is_sup => Node::Scripts { base: Box::new(other), sup: Some(arg), sub: None },
                        other => Node::Scripts { base: Box::new(other), sup: None, sub: Some(arg) },
                    };
                    items.push(node);
                }
                Some(_) => items.push(self.atom()?),
            }
        }
        Ok(Node::Row(items))
    }

    fn argument(&mut self) -> Result<Node> {
        match self.peek() {
            None => Err(malformed("missing argument")),
            Some("^" | "_" | "}") => Err(malformed(format!("unexpected token at position {}", self.pos))),
            Some(_) => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<Node> {
        match self.next() {
            Some("{") => self.row(true),
            Some("\\frac") => {
                let num = self.argument()?;
                let den = self.argument()?;
                Ok(Node::Frac(Box::new(num), Box::new(den)))
            }
            Some("\\sqrt") => Ok(Node::Sqrt(Box::new(self.argument()?))),
            Some(t) => Ok(Node::Glyph(t.to_string())),
            None => Err(malformed("missing atom")),
        }
    }
}

/// Parses whitespace-separated markup into a layout tree.
pub fn parse(markup: &str) -> Result<Node> {
    let tokens: Vec<&str> = markup.split_whitespace().collect();
    Parser { tokens: &tokens, pos: 0 }.row(false)
}

/// Strokes of one visible symbol, in em units relative to the main baseline.
#[derive(Debug, Clone)]
struct Placed {
    token: String,
    strokes: Vec<Stroke>,
}

#[derive(Debug, Clone, Default)]
struct Laid {
    width: f64,
    ascent: f64,
    descent: f64,
    items: Vec<Placed>,
}

impl Laid {
    fn shifted(mut self, dx: f64, dy: f64) -> Vec<Placed> {
        for p in &mut self.items {
            for s in &mut p.strokes {
                for pt in s.iter_mut() {
                    pt.0 += dx;
                    pt.1 += dy;
                }
            }
        }
        self.items
    }
}

fn extents(strokes: &[Stroke]) -> (f64, f64) {
    let mut top = f64::INFINITY;
    let mut bottom = f64::NEG_INFINITY;
    for p in strokes.iter().flatten() {
        top = top.min(p.1);
        bottom = bottom.max(p.1);
    }
    (top, bottom)
}

fn symmetric(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.random_range(-range..=range)
    }
}

struct Layout<'a> {
    rng: &'a mut ChaCha8Rng,
    jitter: GlyphJitter,
    stroke_em: f64,
}

impl Layout<'_> {
    fn lay(&mut self, node: &Node, scale: f64) -> Result<Laid> {
        match node {
            Node::Glyph(t) => self.glyph(t, scale),
            Node::Row(items) => {
                let mut out = Laid::default();
                let gap = 0.08 * scale;
                for (i, item) in items.iter().enumerate() {
                    let laid = self.lay(item, scale)?;
                    if i > 0 {
                        out.width += gap;
                    }
                    let x = out.width;
                    out.width += laid.width;
                    out.ascent = out.ascent.max(laid.ascent);
                    out.descent = out.descent.max(laid.descent);
                    out.items.extend(laid.shifted(x, 0.0));
                }
                Ok(out)
            }
            Node::Scripts { base, sup, sub } => {
                let base = self.lay(base, scale)?;
                let small = scale * 0.62;
                let sup = sup.as_ref().map(|n| self.lay(n, small)).transpose()?;
                let sub = sub.as_ref().map(|n| self.lay(n, small)).transpose()?;
                let x = base.width + 0.05 * scale;
                let mut out = Laid {
                    width: x,
                    ascent: base.ascent,
                    descent: base.descent,
                    items: Vec::new(),
                };
                let mut sup_bottom = f64::NEG_INFINITY;
                if let Some(sup) = sup {
                    let y = (-0.6 * base.ascent).min(-0.35 * scale - sup.descent);
                    sup_bottom = y + sup.descent;
                    out.width = out.width.max(x + sup.width);
                    out.ascent = out.ascent.max(sup.ascent - y);
                    out.items.extend(sup.shifted(x, y));
                }
                if let Some(sub) = sub {
                    let mut y = (0.3 * scale).max(0.6 * base.descent);
                    y = y.max(sup_bottom + 0.1 * scale + sub.ascent);
                    out.width = out.width.max(x + sub.width);
                    out.descent = out.descent.max(y + sub.descent);
                    out.items.extend(sub.shifted(x, y));
                }
                out.items.extend(base.items);
                Ok(out)
            }
            Node::Frac(num, den) => {
                let inner = scale * 0.8;
                let num = self.lay(num, inner)?;
                let den = self.lay(den, inner)?;
                let axis = 0.45 * scale;
                let gap = 0.2 * scale + self.stroke_em;
                let width = num.width.max(den.width) + 0.3 * scale;
                let num_y = -axis - gap - num.descent;
                let den_y = -axis + gap + den.ascent;
                let out_ascent = axis + gap + num.descent + num.ascent;
                let out_descent = den_y + den.descent;
                let tilt = symmetric(self.rng, self.jitter.baseline * 0.3 * scale);
                let bar = Placed {
                    token: "\\frac".into(),
                    strokes: vec![vec![(0.05 * scale, -axis - tilt), (width - 0.05 * scale, -axis + tilt)]],
                };
                let mut items = vec![bar];
                let (num_x, den_x) = ((width - num.width) / 2.0, (width - den.width) / 2.0);
                items.extend(num.shifted(num_x, num_y));
                items.extend(den.shifted(den_x, den_y));
                Ok(Laid { width, ascent: out_ascent, descent: out_descent, items })
            }
            Node::Sqrt(body) => {
                let body = self.lay(body, scale)?;
                let pad = 0.15 * scale + self.stroke_em;
                let top = -(body.ascent.max(0.5 * scale) + pad);
                let bottom = body.descent.max(0.05 * scale);
                let lead = 0.45 * scale;
                let width = lead + body.width + 0.1 * scale;
                let mid = top + 0.65 * (bottom - top);
                let radical = Placed {
                    token: "\\sqrt".into(),
                    strokes: vec![vec![(0.0, mid), (0.12 * scale, mid - 0.05 * scale), (0.22 * scale, bottom), (0.38 * scale, top), (width, top)]],
                };
                let mut items = vec![radical];
                items.extend(body.shifted(lead, 0.0));
                Ok(Laid { width, ascent: -top + self.stroke_em, descent: bottom, items })
            }
        }
    }

    fn glyph(&mut self, token: &str, scale: f64) -> Result<Laid> {
        let g = glyph(token).ok_or_else(|| malformed(format!("no glyph for token {token:?}")))?;
        let s = scale * (1.0 + symmetric(self.rng, self.jitter.scale));
        let theta = symmetric(self.rng, self.jitter.rotation_deg).to_radians();
        let dy = symmetric(self.rng, self.jitter.baseline) * scale;
        let (sin, cos) = theta.sin_cos();
        let (cx, cy) = (g.advance * s / 2.0, -0.5 * s);
        let strokes: Vec<Stroke> = g
            .strokes
            .iter()
            .map(|stroke| {
                stroke
                    .iter()
                    .map(|&(gx, gy)| {
                        let (x, y) = (gx * s - cx, (gy - 1.0) * s - cy);
                        (cx + cos * x - sin * y, cy + sin * x + cos * y + dy)
                    })
                    .collect()
            })
            .collect();
        let (top, bottom) = extents(&strokes);
        Ok(Laid {
            width: g.advance * scale,
            ascent: (-top).max(0.0) + self.stroke_em,
            descent: bottom.max(0.0) + self.stroke_em,
            items: vec![Placed { token: token.to_string(), strokes }],
        })
    }
}

/// Ink footprint of one rendered symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphBox {
    pub token: String,
    /// Inclusive pixel bounds of every pixel the symbol touches.
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub ink_pixels: usize,
}

#[derive(Debug, Clone)]
pub struct Rendering {
    pub image: Raster,
    pub glyphs: Vec<GlyphBox>,
}

/// Rendering geometry in pixels.
#[derive(Debug, Clone, Copy)]
pub struct RenderGeometry {
    pub canvas_height: usize,
    pub em_px: f64,
    pub margin_px: f64,
    pub stroke_radius_em: f64,
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Lays out and rasterises markup; ink is 1 on a 0 background.
pub fn render(markup: &str, geom: &RenderGeometry, jitter: GlyphJitter, rng: &mut ChaCha8Rng) -> Result<Rendering> {
    if geom.canvas_height == 0 || geom.em_px <= 0.0 {
        return Err(Error::Config("canvas height and glyph size must be positive".into()));
    }
    let tree = parse(markup)?;
    let laid = Layout { rng, jitter, stroke_em: geom.stroke_radius_em }.lay(&tree, 1.0)?;
    let h = geom.canvas_height;
    let usable = h as f64 - 2.0 * geom.margin_px;
    let content = (laid.ascent + laid.descent).max(1e-6);
    let em = geom.em_px.min(usable / content);
    let baseline = geom.margin_px + laid.ascent * em + (usable - content * em) / 2.0;
    let raw_width = (laid.width * em + 2.0 * geom.margin_px).ceil().max(1.0) as usize;
    let w = raw_width.div_ceil(16) * 16;
    let x_off = geom.margin_px + (w - raw_width) as f64 / 2.0;
    let radius = (geom.stroke_radius_em * em).max(0.8);

    let mut image = Raster::zeros(h, w);
    let mut glyphs = Vec::with_capacity(laid.items.len());
    for placed in &laid.items {
        let strokes: Vec<Vec<(f64, f64)>> = placed
            .strokes
            .iter()
            .map(|s| s.iter().map(|&(x, y)| (x_off + x * em, baseline + y * em)).collect())
            .collect();
        let reach = radius + 0.5;
        let (mut lx, mut ly, mut hx, mut hy) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in strokes.iter().flatten() {
            lx = lx.min(x);
            ly = ly.min(y);
            hx = hx.max(x);
            hy = hy.max(y);
        }
        let px0 = (lx - reach).floor().max(0.0) as usize;
        let py0 = (ly - reach).floor().max(0.0) as usize;
        let px1 = ((hx + reach).ceil().max(0.0) as usize).min(w - 1);
        let py1 = ((hy + reach).ceil().max(0.0) as usize).min(h - 1);
        let mut bbox = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut ink = 0;
        for py in py0..=py1 {
            for px in px0..=px1 {
                let c = (px as f64 + 0.5, py as f64 + 0.5);
                let mut d = f64::INFINITY;
                for s in &strokes {
                    for seg in s.windows(2) {
                        d = d.min(segment_distance(c, seg[0], seg[1]));
                    }
                }
                let cov = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
                if cov > 0.0 {
                    ink += 1;
                    bbox = (bbox.0.min(px), bbox.1.min(py), bbox.2.max(px), bbox.3.max(py));
                    let cell = &mut image.data[py * w + px];
                    *cell = cell.max(cov);
                }
            }
        }
        glyphs.push(GlyphBox {
            token: placed.token.clone(),
            x0: bbox.0,
            y0: bbox.1,
            x1: bbox.2,
            y1: bbox.3,
            ink_pixels: ink,
        });
    }
    Ok(Rendering { image, glyphs })
}
