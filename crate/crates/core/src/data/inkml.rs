use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::{DataError, Result};

/// Pen strokes, each a polyline of `(x, y)` points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StrokeSet {
    pub strokes: Vec<Vec<(f64, f64)>>,
}

impl StrokeSet {
    /// Rejects empty strokes and non-finite coordinates.
    pub fn new(strokes: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        for (i, s) in strokes.iter().enumerate() {
            if s.is_empty() {
                return Err(DataError::Invalid(format!("stroke {i} has no points")));
            }
            if s.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                return Err(DataError::Invalid(format!("stroke {i} has a non-finite coordinate")));
            }
        }
        Ok(StrokeSet { strokes })
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }

    /// `(min_x, min_y, max_x, max_y)`, `None` when there are no points.
    pub fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let mut pts = self.strokes.iter().flatten();
        let &(x0, y0) = pts.next()?;
        Some(pts.fold((x0, y0, x0, y0), |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y))))
    }
}

/// Contents of one InkML document.
#[derive(Clone, Debug, PartialEq)]
pub struct Ink {
    pub strokes: StrokeSet,
    /// Expression-level truth annotation, verbatim. `None` when absent.
    pub truth: Option<String>,
}

fn perr(offset: u64, message: impl Into<String>) -> DataError {
    DataError::Parse { offset, message: message.into() }
}

fn is_truth(e: &BytesStart<'_>) -> bool {
    e.attributes()
        .flatten()
        .any(|a| a.key.local_name().as_ref() == b"type" && a.value.as_ref() == b"truth")
}

/// `"x y [more channels], x y, ..."`; channels after the first two are ignored.
fn parse_points(text: &str, offset: u64) -> Result<Vec<(f64, f64)>> {
    let mut pts = Vec::new();
    for chunk in text.split(',') {
        let mut nums = chunk.split_whitespace();
        let (Some(x), Some(y)) = (nums.next(), nums.next()) else {
            if chunk.trim().is_empty() {
                continue;
            }
            return Err(perr(offset, format!("trace point {chunk:?} needs two coordinates")));
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(offset, format!("bad coordinate {s:?}")))
        };
        pts.push((num(x)?, num(y)?));
    }
    if pts.is_empty() {
        return Err(perr(offset, "empty trace"));
    }
    Ok(pts)
}

/// Extracts every `trace` in document order and the `truth` annotation
/// that is a direct child of the root `ink` element.
pub fn parse_inkml(bytes: &[u8]) -> Result<Ink> {
    let mut reader = Reader::from_reader(bytes);
    reader.config_mut().check_end_names = true;

    #[derive(PartialEq)]
    enum Capture {
        None,
        Trace,
        Truth,
    }
    let mut strokes = Vec::new();
    let mut truth: Option<String> = None;
    let mut depth = 0usize;
    let mut seen_root = false;
    let mut capture = Capture::None;
    let mut capture_depth = 0;
    let mut text = String::new();
    let mut text_offset = 0u64;

    loop {
        let offset = reader.buffer_position();
        let event = reader
            .read_event()
            .map_err(|e| perr(reader.error_position(), e.to_string()))?;
        match event {
            Event::Start(e) => {
                let name = e.local_name();
                if depth == 0 {
                    if seen_root || name.as_ref() != b"ink" {
                        return Err(perr(offset, "root element must be a single <ink>"));
                    }
                    seen_root = true;
                }
                depth += 1;
                if capture == Capture::None {
                    if name.as_ref() == b"trace" {
                        capture = Capture::Trace;
                    } else if depth == 2 && truth.is_none() && name.as_ref() == b"annotation" && is_truth(&e) {
                        capture = Capture::Truth;
                    }
                    if capture != Capture::None {
                        capture_depth = depth;
                        text.clear();
                        text_offset = reader.buffer_position();
                    }
                }
            }
            Event::Empty(e) => {
                if depth == 0 {
                    return Err(perr(offset, "root element must be a non-empty <ink>"));
                }
                if e.local_name().as_ref() == b"trace" {
                    return Err(perr(offset, "empty trace"));
                }
            }
            Event::Text(t) => {
                if depth == 0 {
                    if t.iter().any(|b| !b.is_ascii_whitespace()) {
                        return Err(perr(offset, "text outside the root element"));
                    }
                } else if capture != Capture::None {
                    let s = t.unescape().map_err(|e| perr(offset, e.to_string()))?;
                    text.push_str(&s);
                }
            }
            Event::CData(t) => {
                if capture != Capture::None {
                    text.push_str(&String::from_utf8_lossy(&t));
                }
            }
            Event::End(_) => {
                if capture != Capture::None && depth == capture_depth {
                    match capture {
                        Capture::Trace => strokes.push(parse_points(&text, text_offset)?),
                        Capture::Truth => truth = Some(text.clone()),
                        Capture::None => {}
                    }
                    capture = Capture::None;
                }
                depth -= 1;
            }
            Event::Eof => {
                if depth != 0 {
                    return Err(perr(offset, "unexpected end of document inside an element"));
                }
                if !seen_root {
                    return Err(perr(offset, "no <ink> root element"));
                }
                break;
            }
            _ => {}
        }
    }
    Ok(Ink { strokes: StrokeSet::new(strokes)?, truth })
}

/// Trims whitespace and one pair of surrounding `$` or `$$` delimiters.
pub fn strip_math_delimiters(truth: &str) -> &str {
    let t = truth.trim();
    for d in ["$$", "$"] {
        if t.len() >= 2 * d.len() && t.starts_with(d) && t.ends_with(d) {
            return t[d.len()..t.len() - d.len()].trim();
        }
    }
    t
}
