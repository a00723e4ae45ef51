//! Best-effort import of an SVG subset. Maps line/circle/ellipse/text
//! elements and M/L polyline paths onto the five primitive kinds; everything
//! else lands on the skip list.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{Drawing, Geometry, Primitive};

use super::SkippedElement;

struct Tag {
    name: String,
    attrs: HashMap<String, String>,
    #[allow(dead_code)]
    self_closing: bool,
    /// Text content up to the matching close tag, for <text> elements.
    content: Option<String>,
    start_offset: usize,
}

fn scan_tags(input: &str) -> Result<Vec<Tag>> {
    let bytes = input.as_bytes();
    let mut tags = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        let start = i;
        let close = input[i..].find('>').ok_or(Error::Parse {
            offset: i,
            reason: "unterminated tag".into(),
        })? + i;
        let inner = &input[i + 1..close];
        i = close + 1;
        if inner.starts_with('/') || inner.starts_with('?') || inner.starts_with('!') {
            continue;
        }
        let self_closing = inner.ends_with('/');
        let inner = inner.trim_end_matches('/');
        let mut parts = inner.splitn(2, char::is_whitespace);
        let name = parts.next().unwrap_or("").to_string();
        let mut attrs = HashMap::new();
        if let Some(rest) = parts.next() {
            let mut chars = rest.char_indices().peekable();
            while let Some(&(j, c)) = chars.peek() {
                if c.is_whitespace() {
                    chars.next();
                    continue;
                }
                let eq = match rest[j..].find('=') {
                    Some(k) => j + k,
                    None => break,
                };
                let key = rest[j..eq].trim().to_string();
                let after = rest[eq + 1..].trim_start();
                let quote = after.chars().next().unwrap_or('"');
                if quote != '"' && quote != '\'' {
                    return Err(Error::Parse {
                        offset: start,
                        reason: format!("unquoted attribute value for '{key}'"),
                    });
                }
                let vstart = rest.len() - after.len() + 1;
                let vend = rest[vstart..].find(quote).ok_or(Error::Parse {
                    offset: start,
                    reason: format!("unterminated attribute value for '{key}'"),
                })? + vstart;
                attrs.insert(key, rest[vstart..vend].to_string());
                while let Some(&(k, _)) = chars.peek() {
                    if k <= vend {
                        chars.next();
                    } else {
                        break;
                    }
                }
            }
        }
        let content = if name == "text" && !self_closing {
            let close_tag = "</text>";
            input[i..].find(close_tag).map(|k| {
                let c = input[i..i + k].trim().to_string();
                i += k + close_tag.len();
                c
            })
        } else {
            None
        };
        tags.push(Tag {
            name,
            attrs,
            self_closing,
            content,
            start_offset: start,
        });
    }
    Ok(tags)
}

fn num(tag: &Tag, key: &str, default: Option<f64>) -> Result<f64> {
    match tag.attrs.get(key) {
        Some(v) => v.trim().parse::<f64>().map_err(|_| Error::Parse {
            offset: tag.start_offset,
            reason: format!("attribute {key}='{v}' is not a number"),
        }),
        None => default.ok_or(Error::Parse {
            offset: tag.start_offset,
            reason: format!("missing attribute '{key}' on <{}>", tag.name),
        }),
    }
}

/// Parse a path `d` attribute supporting absolute M/L (and Z closing back to
/// the subpath start). Returns line segments, or the unsupported command.
fn path_segments(d: &str) -> std::result::Result<Vec<(f64, f64, f64, f64)>, String> {
    let mut segs = Vec::new();
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for c in d.chars() {
        if c.is_ascii_alphabetic() {
            if !cur.is_empty() {
                tokens.push(cur.clone());
                cur.clear();
            }
            tokens.push(c.to_string());
        } else if c.is_whitespace() || c == ',' {
            if !cur.is_empty() {
                tokens.push(cur.clone());
                cur.clear();
            }
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }

    let mut pos: Option<(f64, f64)> = None;
    let mut subpath_start: Option<(f64, f64)> = None;
    let mut i = 0;
    let mut cmd = ' ';
    while i < tokens.len() {
        let t = &tokens[i];
        if t.len() == 1 && t.chars().next().unwrap().is_ascii_alphabetic() {
            cmd = t.chars().next().unwrap();
            i += 1;
            if cmd == 'Z' || cmd == 'z' {
                if let (Some(p), Some(s)) = (pos, subpath_start) {
                    if p != s {
                        segs.push((p.0, p.1, s.0, s.1));
                    }
                    pos = Some(s);
                }
                continue;
            }
            if cmd != 'M' && cmd != 'L' {
                return Err(format!("unsupported path command '{cmd}'"));
            }
            continue;
        }
        let x: f64 = t.parse().map_err(|_| format!("bad coordinate '{t}'"))?;
        let y: f64 = tokens
            .get(i + 1)
            .ok_or("odd coordinate count")?
            .parse()
            .map_err(|_| format!("bad coordinate '{}'", tokens[i + 1]))?;
        i += 2;
        match cmd {
            'M' => {
                pos = Some((x, y));
                subpath_start = Some((x, y));
                cmd = 'L'; // implicit lineto after moveto
            }
            'L' => {
                let p = pos.ok_or("L before M")?;
                segs.push((p.0, p.1, x, y));
                pos = Some((x, y));
            }
            _ => return Err("coordinates before any command".into()),
        }
    }
    Ok(segs)
}

/// Parse an SVG subset into an unlabeled drawing (labels are background,
/// text gets the annotation pseudo-class). Unsupported elements are returned
/// in the skip list.
pub fn parse_svg_subset(bytes: &[u8]) -> Result<(Drawing, Vec<SkippedElement>)> {
    let input = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to(),
        reason: "invalid utf-8".into(),
    })?;
    let tags = scan_tags(input)?;
    let mut geoms: Vec<Geometry> = Vec::new();
    let mut skipped = Vec::new();

    for tag in &tags {
        match tag.name.as_str() {
            "svg" | "g" | "defs" | "title" | "desc" => {}
            "line" => {
                geoms.push(Geometry::Line {
                    x1: num(tag, "x1", None)?,
                    y1: num(tag, "y1", None)?,
                    x2: num(tag, "x2", None)?,
                    y2: num(tag, "y2", None)?,
                });
            }
            "circle" => {
                geoms.push(Geometry::Circle {
                    cx: num(tag, "cx", Some(0.0))?,
                    cy: num(tag, "cy", Some(0.0))?,
                    r: num(tag, "r", None)?,
                });
            }
            "ellipse" => {
                let rx = num(tag, "rx", None)?;
                let ry = num(tag, "ry", None)?;
                let (a, b, rot) = if rx >= ry {
                    (rx, ry, 0.0)
                } else {
                    (ry, rx, std::f64::consts::FRAC_PI_2)
                };
                geoms.push(Geometry::Ellipse {
                    cx: num(tag, "cx", Some(0.0))?,
                    cy: num(tag, "cy", Some(0.0))?,
                    a,
                    b,
                    rot,
                });
            }
            "text" => {
                let x = num(tag, "x", Some(0.0))?;
                let y = num(tag, "y", Some(0.0))?;
                let size = num(tag, "font-size", Some(1.0))?;
                let content = tag.content.clone().unwrap_or_default();
                // nominal glyph box: 0.6 em per character
                let w = (content.chars().count().max(1) as f64) * 0.6 * size;
                geoms.push(Geometry::Text {
                    xmin: x,
                    ymin: y - size,
                    xmax: x + w,
                    ymax: y,
                    content,
                    rot: 0.0,
                });
            }
            "path" => match tag.attrs.get("d") {
                Some(d) => match path_segments(d) {
                    Ok(segs) => {
                        for (x1, y1, x2, y2) in segs {
                            geoms.push(Geometry::Line { x1, y1, x2, y2 });
                        }
                    }
                    Err(reason) => skipped.push(SkippedElement {
                        element: format!("path d=\"{d}\""),
                        reason,
                    }),
                },
                None => skipped.push(SkippedElement {
                    element: "path".into(),
                    reason: "missing d attribute".into(),
                }),
            },
            other => skipped.push(SkippedElement {
                element: other.to_string(),
                reason: "unsupported element".into(),
            }),
        }
    }

    let mut drawing = Drawing::new(Vec::new(), Vec::new());
    let annotation = drawing.annotation_label();
    drawing.primitives = geoms
        .into_iter()
        .enumerate()
        .map(|(id, geometry)| {
            let (label, instance) = if geometry.is_text() {
                (annotation, -1)
            } else {
                (0, -1)
            };
            Primitive {
                id,
                geometry,
                label,
                instance,
            }
        })
        .collect();
    Ok((drawing, skipped))
}
