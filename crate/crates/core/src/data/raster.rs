use std::io::Write;
use std::path::Path;

use super::{io_err, DataError, Result, StrokeSet};

/// Grayscale image, row-major, background 0 and ink 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Bitmap { width, height, pixels: vec![0.0; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(DataError::Invalid(format!(
                "{} pixels for a {width}x{height} bitmap",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Invalid("pixel values must lie in [0, 1]".into()));
        }
        Ok(Bitmap { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Binary 8-bit PGM (`P5`), ink stored dark on white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| 255 - (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| DataError::Invalid(format!("PGM: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("only binary P5 is supported"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("maxval must be 1..=255"));
        }
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
        if data.len() < w * h {
            return Err(bad("truncated pixel data"));
        }
        let pixels = data[..w * h].iter().map(|&v| 1.0 - v as f32 / maxval as f32).collect();
        Self::from_pixels(w, h, pixels)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_pgm()).map_err(io_err(path))
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_pgm(&std::fs::read(path).map_err(io_err(path))?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterParams {
    /// Height of the ink bounding box in pixels.
    pub target_height: usize,
    pub pen_width: f64,
    pub margin: usize,
    pub max_width: usize,
}

impl Default for RasterParams {
    fn default() -> Self {
        RasterParams { target_height: 128, pen_width: 2.0, margin: 4, max_width: 1600 }
    }
}

/// Squared distance from `p` to segment `a`-`b`.
fn dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

/// Draws a segment of radius `r`; pixel coverage is `clamp(r + 1/2 - d)`
/// with `d` the distance from the pixel center, combined by maximum.
fn draw_segment(img: &mut Bitmap, a: (f64, f64), b: (f64, f64), r: f64) {
    let reach = r + 0.5;
    let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
    let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(img.width);
    let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = dist2((x as f64 + 0.5, y as f64 + 0.5), a, b).sqrt();
            let cov = (reach - d).clamp(0.0, 1.0) as f32;
            let px = &mut img.pixels[y * img.width + x];
            if cov > *px {
                *px = cov;
            }
        }
    }
}

/// Renders strokes as anti-aliased polylines.
///
/// The ink is scaled isotropically so its bounding box is `target_height`
/// tall (or, for flat ink, `target_height` wide), shrunk further if the
/// width would exceed `max_width`, and placed at `margin` from the top-left
/// corner. Output depends only on the shape of the ink, not on its source
/// position or scale. Ink collapsing to a single point renders as a dot at
/// the center of a square canvas.
pub fn rasterize(strokes: &StrokeSet, params: &RasterParams) -> Result<Bitmap> {
    let (min_x, min_y, max_x, max_y) =
        strokes.bounds().ok_or_else(|| DataError::Invalid("cannot rasterize an empty stroke set".into()))?;
    if params.target_height == 0 || params.pen_width <= 0.0 || params.max_width <= 2 * params.margin {
        return Err(DataError::Invalid(format!("bad raster parameters {params:?}")));
    }
    let m = params.margin as f64;
    let r = params.pen_width / 2.0;
    let th = params.target_height as f64;
    let height = params.target_height + 2 * params.margin;
    let (bw, bh) = (max_x - min_x, max_y - min_y);
    if bw == 0.0 && bh == 0.0 {
        let side = height.min(params.max_width);
        let mut img = Bitmap::new(side, height);
        let c = (side as f64 / 2.0, height as f64 / 2.0);
        draw_segment(&mut img, c, c, r);
        return Ok(img);
    }
    let mut scale = if bh > 0.0 { th / bh } else { th / bw };
    let avail = (params.max_width - 2 * params.margin) as f64;
    if bw * scale > avail {
        scale = avail / bw;
    }
    let width = ((bw * scale).ceil() as usize + 2 * params.margin).clamp(1, params.max_width);
    let mut img = Bitmap::new(width, height);
    // Flat ink is centered vertically.
    let y_off = m + (th - bh * scale) / 2.0;
    let map = |(x, y): (f64, f64)| (m + (x - min_x) * scale, y_off + (y - min_y) * scale);
    for s in &strokes.strokes {
        if s.len() == 1 {
            let p = map(s[0]);
            draw_segment(&mut img, p, p, r);
        }
        for w in s.windows(2) {
            draw_segment(&mut img, map(w[0]), map(w[1]), r);
        }
    }
    Ok(img)
}
