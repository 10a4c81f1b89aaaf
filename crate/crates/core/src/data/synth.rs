//! Synthetic handwriting: a small expression grammar rendered with a
//! jittered stroke font.

use crate::numerics::RngState;

use super::{rasterize, DataError, RasterParams, Result, Sample, StrokeSet, Vocab};

pub const ATOMS: [&str; 15] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "a", "b", "n", "x", "y"];
pub const OPERATORS: [&str; 3] = ["+", "-", "="];
pub const STRUCTURE: [&str; 5] = ["\\frac", "^", "_", "{", "}"];

/// Every token the grammar can emit.
pub fn synth_tokens() -> Vec<&'static str> {
    ATOMS.iter().chain(&OPERATORS).chain(&STRUCTURE).copied().collect()
}

pub fn synth_vocab() -> Vocab {
    Vocab::new(&synth_tokens()).expect("synthetic tokens are distinct")
}

/// Expression tree produced by the grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Atom(&'static str),
    /// `atom op rest`
    Infix(&'static str, &'static str, Box<Expr>),
    /// `atom ^ { script }`
    Sup(&'static str, Box<Expr>),
    /// `atom _ { script }`
    Sub(&'static str, Box<Expr>),
    /// `\frac { num } { atom }`
    Frac(Box<Expr>, &'static str),
}

impl Expr {
    pub fn tokens(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        self.push_tokens(&mut out);
        out
    }

    fn push_tokens(&self, out: &mut Vec<&'static str>) {
        match self {
            Expr::Atom(a) => out.push(a),
            Expr::Infix(a, op, rest) => {
                out.extend([*a, *op]);
                rest.push_tokens(out);
            }
            Expr::Sup(a, s) | Expr::Sub(a, s) => {
                out.extend([*a, if matches!(self, Expr::Sup(..)) { "^" } else { "_" }, "{"]);
                s.push_tokens(out);
                out.push("}");
            }
            Expr::Frac(num, den) => {
                out.extend(["\\frac", "{"]);
                num.push_tokens(out);
                out.extend(["}", "{", den, "}"]);
            }
        }
    }
}

/// Relative weights of the productions at depth `d >= 1`:
/// descend, infix, superscript, subscript, fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grammar {
    pub weights: [f64; 5],
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar { weights: [1.0, 3.0, 1.5, 1.5, 1.5] }
    }
}

impl Grammar {
    /// `gen(0)` is an atom; `gen(d)` is one of `gen(d-1)`,
    /// `atom op gen(d-1)`, `atom^{gen(d-1)}`, `atom_{gen(d-1)}` or
    /// `\frac{gen(max(d-2, 0))}{atom}`.
    pub fn generate(&self, rng: &mut RngState, depth: usize) -> Expr {
        let atom = |rng: &mut RngState| ATOMS[rng.below(ATOMS.len())];
        if depth == 0 {
            return Expr::Atom(atom(rng));
        }
        match rng.weighted(&self.weights) {
            0 => self.generate(rng, depth - 1),
            1 => {
                let a = atom(rng);
                let op = OPERATORS[rng.below(OPERATORS.len())];
                Expr::Infix(a, op, Box::new(self.generate(rng, depth - 1)))
            }
            2 => {
                let a = atom(rng);
                Expr::Sup(a, Box::new(self.generate(rng, depth - 1)))
            }
            3 => {
                let a = atom(rng);
                Expr::Sub(a, Box::new(self.generate(rng, depth - 1)))
            }
            _ => {
                let num = self.generate(rng, depth.saturating_sub(2));
                Expr::Frac(Box::new(num), atom(rng))
            }
        }
    }
}

type Stroke = Vec<(f64, f64)>;

/// Glyph strokes in a box `[0, width] x [0, 1]`, y pointing down.
fn glyph(sym: &str) -> (f64, Vec<Stroke>) {
    let s = |pts: &[(f64, f64)]| pts.to_vec();
    let ellipse = |cx: f64, cy: f64, rx: f64, ry: f64| {
        (0..=12)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / 12.0;
                (cx + rx * t.sin(), cy - ry * t.cos())
            })
            .collect::<Vec<_>>()
    };
    match sym {
        "0" => (0.8, vec![ellipse(0.4, 0.5, 0.3, 0.5)]),
        "1" => (0.6, vec![s(&[(0.1, 0.2), (0.35, 0.0), (0.35, 1.0)])]),
        "2" => (0.8, vec![s(&[(0.1, 0.25), (0.25, 0.05), (0.5, 0.0), (0.7, 0.1), (0.72, 0.3), (0.6, 0.5), (0.1, 1.0), (0.8, 1.0)])]),
        "3" => (0.8, vec![s(&[(0.1, 0.1), (0.4, 0.0), (0.7, 0.15), (0.6, 0.4), (0.35, 0.5), (0.7, 0.6), (0.75, 0.85), (0.4, 1.0), (0.1, 0.9)])]),
        "4" => (0.8, vec![s(&[(0.6, 1.0), (0.6, 0.0), (0.05, 0.65), (0.8, 0.65)])]),
        "5" => (0.8, vec![s(&[(0.7, 0.0), (0.15, 0.0), (0.1, 0.45), (0.45, 0.4), (0.7, 0.55), (0.7, 0.85), (0.4, 1.0), (0.1, 0.9)])]),
        "6" => (0.8, vec![s(&[(0.65, 0.05), (0.35, 0.1), (0.15, 0.45), (0.15, 0.8), (0.4, 1.0), (0.65, 0.85), (0.65, 0.6), (0.4, 0.5), (0.15, 0.65)])]),
        "7" => (0.8, vec![s(&[(0.05, 0.0), (0.75, 0.0), (0.3, 1.0)])]),
        "8" => (0.8, vec![s(&[(0.4, 0.5), (0.15, 0.3), (0.4, 0.0), (0.65, 0.25), (0.4, 0.5), (0.1, 0.75), (0.4, 1.0), (0.7, 0.75), (0.4, 0.5)])]),
        "9" => (0.8, vec![s(&[(0.65, 0.4), (0.4, 0.5), (0.15, 0.3), (0.4, 0.0), (0.65, 0.2), (0.65, 0.5), (0.55, 1.0)])]),
        "a" => (0.75, vec![s(&[(0.6, 0.5), (0.35, 0.4), (0.1, 0.6), (0.15, 0.95), (0.4, 1.0), (0.6, 0.8)]), s(&[(0.6, 0.4), (0.65, 1.0)])]),
        "b" => (0.75, vec![s(&[(0.1, 0.0), (0.1, 1.0)]), s(&[(0.1, 0.6), (0.35, 0.4), (0.6, 0.6), (0.6, 0.85), (0.35, 1.0), (0.1, 0.9)])]),
        "n" => (0.75, vec![s(&[(0.1, 0.4), (0.1, 1.0)]), s(&[(0.1, 0.55), (0.35, 0.4), (0.6, 0.5), (0.6, 1.0)])]),
        "x" => (0.75, vec![s(&[(0.1, 0.4), (0.6, 1.0)]), s(&[(0.6, 0.4), (0.1, 1.0)])]),
        "y" => (0.75, vec![s(&[(0.1, 0.4), (0.35, 0.8)]), s(&[(0.6, 0.4), (0.2, 1.25)])]),
        "+" => (0.8, vec![s(&[(0.1, 0.5), (0.7, 0.5)]), s(&[(0.4, 0.2), (0.4, 0.8)])]),
        "-" => (0.8, vec![s(&[(0.1, 0.5), (0.7, 0.5)])]),
        "=" => (0.8, vec![s(&[(0.1, 0.38), (0.7, 0.38)]), s(&[(0.1, 0.62), (0.7, 0.62)])]),
        other => unreachable!("no glyph for {other:?}"),
    }
}

/// Laid-out ink; the math axis is `y = 0`.
struct Layout {
    strokes: Vec<Stroke>,
    width: f64,
    top: f64,
    bottom: f64,
}

impl Layout {
    fn transformed(mut self, s: f64, dx: f64, dy: f64) -> Layout {
        for p in self.strokes.iter_mut().flatten() {
            *p = (p.0 * s + dx, p.1 * s + dy);
        }
        Layout { strokes: self.strokes, width: self.width * s, top: self.top * s + dy, bottom: self.bottom * s + dy }
    }

    fn append(&mut self, other: Layout) {
        self.top = self.top.min(other.top);
        self.bottom = self.bottom.max(other.bottom);
        self.strokes.extend(other.strokes);
    }
}

/// Per-glyph and per-point perturbation amplitudes, in em units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub scale: f64,
    pub slant: f64,
    pub offset: f64,
    pub point: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter { scale: 0.08, slant: 0.12, offset: 0.04, point: 0.015 }
    }
}

fn draw_glyph(sym: &str, rng: &mut RngState, j: &Jitter) -> Layout {
    let (width, strokes) = glyph(sym);
    let s = 1.0 + rng.uniform(-j.scale, j.scale);
    let slant = rng.uniform(-j.slant, j.slant);
    let (ox, oy) = (rng.uniform(-j.offset, j.offset), rng.uniform(-j.offset, j.offset));
    let strokes: Vec<Stroke> = strokes
        .into_iter()
        .map(|st| {
            st.into_iter()
                .map(|(x, y)| {
                    let y = (y - 0.5) * s + oy;
                    let x = x * s - slant * y + ox;
                    (x + rng.uniform(-j.point, j.point), y + rng.uniform(-j.point, j.point))
                })
                .collect()
        })
        .collect();
    let (top, bottom) = strokes
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(t, b), p| (t.min(p.1), b.max(p.1)));
    Layout { strokes, width: width * s, top, bottom }
}

fn layout(e: &Expr, rng: &mut RngState, j: &Jitter) -> Layout {
    const GAP: f64 = 0.12;
    match e {
        Expr::Atom(a) => draw_glyph(a, rng, j),
        Expr::Infix(a, op, rest) => {
            let mut out = draw_glyph(a, rng, j);
            let o = draw_glyph(op, rng, j).transformed(1.0, out.width + GAP, 0.0);
            out.width += GAP + o.width;
            out.append(o);
            let r = layout(rest, rng, j);
            let r = r.transformed(1.0, out.width + GAP, 0.0);
            out.width += GAP + r.width;
            out.append(r);
            out
        }
        Expr::Sup(a, s) | Expr::Sub(a, s) => {
            let mut out = draw_glyph(a, rng, j);
            let sc = layout(s, rng, j).transformed(0.6, 0.0, 0.0);
            let dy = if matches!(e, Expr::Sup(..)) { out.top + 0.45 - sc.bottom } else { out.bottom - 0.4 - sc.top };
            let sc = sc.transformed(1.0, out.width + 0.05, dy);
            out.width += 0.05 + sc.width;
            out.append(sc);
            out
        }
        Expr::Frac(num, den) => {
            let n = layout(num, rng, j).transformed(0.8, 0.0, 0.0);
            let d = draw_glyph(den, rng, j).transformed(0.8, 0.0, 0.0);
            let w = n.width.max(d.width) + 0.2;
            let y = rng.uniform(-j.offset, j.offset);
            let bar = vec![(0.0, y), (w, y + rng.uniform(-j.offset, j.offset))];
            let (nw, nb, dw, dt) = (n.width, n.bottom, d.width, d.top);
            let n = n.transformed(1.0, (w - nw) / 2.0, -0.15 - nb);
            let d = d.transformed(1.0, (w - dw) / 2.0, 0.15 - dt);
            let mut out = Layout { strokes: vec![bar], width: w, top: y, bottom: y };
            out.append(n);
            out.append(d);
            out
        }
    }
}

/// Handwriting-like strokes for an expression.
pub fn render_strokes(e: &Expr, rng: &mut RngState, jitter: &Jitter) -> StrokeSet {
    StrokeSet { strokes: layout(e, rng, jitter).strokes }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub depth: usize,
    pub grammar: Grammar,
    pub jitter: Jitter,
    pub raster: RasterParams,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { depth: 2, grammar: Grammar::default(), jitter: Jitter::default(), raster: RasterParams::default() }
    }
}

/// `n` rendered samples with ids `synth-00000`, `synth-00001`, ...
pub fn synth_generate(rng: &mut RngState, n: usize, params: &SynthParams, vocab: &Vocab) -> Result<Vec<Sample>> {
    if let Some(t) = synth_tokens().into_iter().find(|t| vocab.id(t).is_none()) {
        return Err(DataError::Vocab(format!("synthetic token {t:?} missing from vocabulary")));
    }
    (0..n)
        .map(|i| {
            let e = params.grammar.generate(rng, params.depth);
            let ids = e.tokens().iter().map(|t| vocab.id(t).expect("checked above")).collect();
            let image = rasterize(&render_strokes(&e, rng, &params.jitter), &params.raster)?;
            Sample::new(format!("synth-{i:05}"), image, ids)
        })
        .collect()
}
