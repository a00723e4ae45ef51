//! Domain types: primitives, symbols, drawings, and the canonical geometric
//! measures (center, length) everything downstream consumes.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Background class id. Never appears in the class table.
pub const BACKGROUND_LABEL: u32 = 0;
/// Instance index carried by stuff, background, and unassigned primitives.
pub const NO_INSTANCE: i32 = -1;

/// One vector element of a CAD drawing. Coordinates are meters unless the
/// containing drawing has been normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Geometry {
    Line {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
    },
    /// Circular arc: start angle and sweep in radians, sweep in (0, 2pi].
    Arc {
        cx: f64,
        cy: f64,
        r: f64,
        start: f64,
        sweep: f64,
    },
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    /// Semi-axes a >= b > 0, rotation in radians.
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        rot: f64,
    },
    /// Axis-aligned bounding box plus the annotation string and its rotation.
    Text {
        xmin: f64,
        ymin: f64,
        xmax: f64,
        ymax: f64,
        content: String,
        rot: f64,
    },
}

impl Geometry {
    pub fn is_text(&self) -> bool {
        matches!(self, Geometry::Text { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Geometry::Line { .. } => "line",
            Geometry::Arc { .. } => "arc",
            Geometry::Circle { .. } => "circle",
            Geometry::Ellipse { .. } => "ellipse",
            Geometry::Text { .. } => "text",
        }
    }

    /// Checks the per-kind invariants, returning the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        match *self {
            Geometry::Line { x1, y1, x2, y2 } => {
                if !finite(&[x1, y1, x2, y2]) {
                    return Err("non-finite line coordinates".into());
                }
            }
            Geometry::Arc {
                cx,
                cy,
                r,
                start,
                sweep,
            } => {
                if !finite(&[cx, cy, r, start, sweep]) {
                    return Err("non-finite arc parameters".into());
                }
                if r <= 0.0 {
                    return Err(format!("arc radius {r} not strictly positive"));
                }
                if sweep <= 0.0 || sweep > 2.0 * PI {
                    return Err(format!("arc sweep {sweep} outside (0, 2pi]"));
                }
            }
            Geometry::Circle { cx, cy, r } => {
                if !finite(&[cx, cy, r]) {
                    return Err("non-finite circle parameters".into());
                }
                if r <= 0.0 {
                    return Err(format!("circle radius {r} not strictly positive"));
                }
            }
            Geometry::Ellipse { cx, cy, a, b, rot } => {
                if !finite(&[cx, cy, a, b, rot]) {
                    return Err("non-finite ellipse parameters".into());
                }
                if !(a >= b && b > 0.0) {
                    return Err(format!("ellipse semi-axes a={a} b={b} violate a >= b > 0"));
                }
            }
            Geometry::Text {
                xmin,
                ymin,
                xmax,
                ymax,
                rot,
                ..
            } => {
                if !finite(&[xmin, ymin, xmax, ymax, rot]) {
                    return Err("non-finite text box".into());
                }
                if !(xmax > xmin && ymax > ymin) {
                    return Err("degenerate text box".into());
                }
            }
        }
        Ok(())
    }

    /// Arc length of the element: Euclidean length for lines, r*|sweep| for
    /// arcs, circumference for circles, Ramanujan's approximation for
    /// ellipses, bounding-box diagonal for text.
    pub fn length(&self) -> f64 {
        match *self {
            Geometry::Line { x1, y1, x2, y2 } => (x2 - x1).hypot(y2 - y1),
            Geometry::Arc { r, sweep, .. } => r * sweep.abs(),
            Geometry::Circle { r, .. } => 2.0 * PI * r,
            Geometry::Ellipse { a, b, .. } => {
                PI * (3.0 * (a + b) - ((3.0 * a + b) * (a + 3.0 * b)).sqrt())
            }
            Geometry::Text {
                xmin,
                ymin,
                xmax,
                ymax,
                ..
            } => (xmax - xmin).hypot(ymax - ymin),
        }
    }

    /// Center point: line midpoint, arc curve midpoint, circle/ellipse
    /// center, text box center.
    pub fn center(&self) -> (f64, f64) {
        match *self {
            Geometry::Line { x1, y1, x2, y2 } => ((x1 + x2) / 2.0, (y1 + y2) / 2.0),
            Geometry::Arc {
                cx,
                cy,
                r,
                start,
                sweep,
            } => {
                let mid = start + sweep / 2.0;
                (cx + r * mid.cos(), cy + r * mid.sin())
            }
            Geometry::Circle { cx, cy, .. } => (cx, cy),
            Geometry::Ellipse { cx, cy, .. } => (cx, cy),
            Geometry::Text {
                xmin,
                ymin,
                xmax,
                ymax,
                ..
            } => ((xmin + xmax) / 2.0, (ymin + ymax) / 2.0),
        }
    }

    /// Orientation of the element's principal axis in radians. Axis-like
    /// (only defined mod pi). Circles and arcs have no axis and report 0.
    pub fn orientation(&self) -> f64 {
        match *self {
            Geometry::Line { x1, y1, x2, y2 } => (y2 - y1).atan2(x2 - x1),
            Geometry::Arc { .. } | Geometry::Circle { .. } => 0.0,
            Geometry::Ellipse { rot, .. } => rot,
            Geometry::Text { rot, .. } => rot,
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Geometry {
        let mut g = self.clone();
        match &mut g {
            Geometry::Line { x1, y1, x2, y2 } => {
                *x1 += dx;
                *y1 += dy;
                *x2 += dx;
                *y2 += dy;
            }
            Geometry::Arc { cx, cy, .. } | Geometry::Circle { cx, cy, .. } => {
                *cx += dx;
                *cy += dy;
            }
            Geometry::Ellipse { cx, cy, .. } => {
                *cx += dx;
                *cy += dy;
            }
            Geometry::Text {
                xmin,
                ymin,
                xmax,
                ymax,
                ..
            } => {
                *xmin += dx;
                *ymin += dy;
                *xmax += dx;
                *ymax += dy;
            }
        }
        g
    }

    /// Uniform scale about the origin. Lengths scale by `s`.
    pub fn scale(&self, s: f64) -> Geometry {
        let mut g = self.clone();
        match &mut g {
            Geometry::Line { x1, y1, x2, y2 } => {
                *x1 *= s;
                *y1 *= s;
                *x2 *= s;
                *y2 *= s;
            }
            Geometry::Arc { cx, cy, r, .. } => {
                *cx *= s;
                *cy *= s;
                *r *= s;
            }
            Geometry::Circle { cx, cy, r } => {
                *cx *= s;
                *cy *= s;
                *r *= s;
            }
            Geometry::Ellipse { cx, cy, a, b, .. } => {
                *cx *= s;
                *cy *= s;
                *a *= s;
                *b *= s;
            }
            Geometry::Text {
                xmin,
                ymin,
                xmax,
                ymax,
                ..
            } => {
                *xmin *= s;
                *ymin *= s;
                *xmax *= s;
                *ymax *= s;
            }
        }
        g
    }

    /// Rotation by `theta` about `(ox, oy)`. Text boxes stay axis-aligned:
    /// the rotated corners are re-boxed and `rot` accumulates the angle, so
    /// quarter-turn rotations are exact.
    pub fn rotate(&self, theta: f64, ox: f64, oy: f64) -> Geometry {
        let (sin, cos) = theta.sin_cos();
        let rot_pt = |x: f64, y: f64| {
            let (dx, dy) = (x - ox, y - oy);
            (ox + dx * cos - dy * sin, oy + dx * sin + dy * cos)
        };
        match *self {
            Geometry::Line { x1, y1, x2, y2 } => {
                let (x1, y1) = rot_pt(x1, y1);
                let (x2, y2) = rot_pt(x2, y2);
                Geometry::Line { x1, y1, x2, y2 }
            }
            Geometry::Arc {
                cx,
                cy,
                r,
                start,
                sweep,
            } => {
                let (cx, cy) = rot_pt(cx, cy);
                Geometry::Arc {
                    cx,
                    cy,
                    r,
                    start: start + theta,
                    sweep,
                }
            }
            Geometry::Circle { cx, cy, r } => {
                let (cx, cy) = rot_pt(cx, cy);
                Geometry::Circle { cx, cy, r }
            }
            Geometry::Ellipse { cx, cy, a, b, rot } => {
                let (cx, cy) = rot_pt(cx, cy);
                Geometry::Ellipse {
                    cx,
                    cy,
                    a,
                    b,
                    rot: rot + theta,
                }
            }
            Geometry::Text {
                xmin,
                ymin,
                xmax,
                ymax,
                ref content,
                rot,
            } => {
                let corners = [
                    rot_pt(xmin, ymin),
                    rot_pt(xmax, ymin),
                    rot_pt(xmax, ymax),
                    rot_pt(xmin, ymax),
                ];
                let xs: Vec<f64> = corners.iter().map(|c| c.0).collect();
                let ys: Vec<f64> = corners.iter().map(|c| c.1).collect();
                Geometry::Text {
                    xmin: xs.iter().cloned().fold(f64::INFINITY, f64::min),
                    ymin: ys.iter().cloned().fold(f64::INFINITY, f64::min),
                    xmax: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    ymax: ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    content: content.clone(),
                    rot: rot + theta,
                }
            }
        }
    }
}

/// A primitive with its ground-truth (or predicted) semantic label and
/// instance index. `instance == -1` marks stuff, background, and text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub id: usize,
    pub geometry: Geometry,
    pub label: u32,
    pub instance: i32,
}

impl Primitive {
    pub fn center(&self) -> (f64, f64) {
        self.geometry.center()
    }

    pub fn length(&self) -> f64 {
        self.geometry.length()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Thing,
    Stuff,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub kind: ClassKind,
}

/// Provenance and tiling metadata carried by a drawing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawingMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// World coordinates of the tile's lower-left corner.
    pub origin: (f64, f64),
    /// Tile edge length in meters; 0 means "not a tile".
    pub tile_size: f64,
    /// Present after text filtering: new id -> original id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_remap: Option<Vec<usize>>,
}

impl Default for DrawingMeta {
    fn default() -> Self {
        DrawingMeta {
            source: None,
            origin: (0.0, 0.0),
            tile_size: 0.0,
            id_remap: None,
        }
    }
}

/// A set of primitives in a common coordinate frame, with class table and
/// provenance. Primitive ids are dense 0..N-1 in list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drawing {
    pub primitives: Vec<Primitive>,
    pub classes: Vec<ClassInfo>,
    pub meta: DrawingMeta,
}

impl Drawing {
    pub fn new(primitives: Vec<Primitive>, classes: Vec<ClassInfo>) -> Self {
        Drawing {
            primitives,
            classes,
            meta: DrawingMeta::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Class id reserved for text annotations: one past the largest real
    /// class id. The class table never contains it.
    pub fn annotation_label(&self) -> u32 {
        self.classes.iter().map(|c| c.id).max().unwrap_or(0) + 1
    }

    /// Total number of model classes: background + real classes + annotation.
    pub fn num_model_classes(&self) -> usize {
        self.annotation_label() as usize + 1
    }

    pub fn class_kind(&self, label: u32) -> Option<ClassKind> {
        self.classes.iter().find(|c| c.id == label).map(|c| c.kind)
    }

    pub fn class_name(&self, label: u32) -> Option<&str> {
        self.classes
            .iter()
            .find(|c| c.id == label)
            .map(|c| c.name.as_str())
    }
}

/// A set of primitives sharing a semantic label and instance index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbol {
    pub label: u32,
    pub instance: i32,
    pub members: BTreeSet<usize>,
}

impl Symbol {
    pub fn new(label: u32, instance: i32, members: impl IntoIterator<Item = usize>) -> Self {
        Symbol {
            label,
            instance,
            members: members.into_iter().collect(),
        }
    }
}

/// Length of a primitive, checking geometry invariants first.
pub fn primitive_length(p: &Primitive) -> Result<f64> {
    p.geometry.validate().map_err(|reason| Error::InvalidGeometry {
        id: p.id,
        reason,
    })?;
    Ok(p.geometry.length())
}

/// Center of a primitive, checking geometry invariants first.
pub fn primitive_center(p: &Primitive) -> Result<(f64, f64)> {
    p.geometry.validate().map_err(|reason| Error::InvalidGeometry {
        id: p.id,
        reason,
    })?;
    Ok(p.geometry.center())
}

/// Sum of ln(1 + L(e)) over the symbol's members. Natural log throughout.
pub fn symbol_weight(s: &Symbol, drawing: &Drawing) -> Result<f64> {
    if s.members.is_empty() {
        return Err(Error::InvalidSymbol("empty member set".into()));
    }
    let mut total = 0.0;
    for &id in &s.members {
        let p = drawing
            .primitives
            .get(id)
            .ok_or_else(|| Error::InvalidSymbol(format!("member {id} not in drawing")))?;
        total += (1.0 + p.length()).ln();
    }
    Ok(total)
}

/// One invariant violation found by [`validate_drawing`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub primitive_id: usize,
    pub reason: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "primitive {}: {}", self.primitive_id, self.reason)
    }
}

/// Diagnostic pass over every drawing invariant. Empty result iff valid.
pub fn validate_drawing(d: &Drawing) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let annotation = d.annotation_label();
    // instance -> label consistency across the drawing
    let mut instance_label: BTreeMap<i32, u32> = BTreeMap::new();

    for (pos, p) in d.primitives.iter().enumerate() {
        if p.id != pos {
            out.push(Violation {
                primitive_id: p.id,
                reason: format!("id {} at position {pos}: ids must be dense in order", p.id),
            });
        }
        if !seen.insert(p.id) {
            out.push(Violation {
                primitive_id: p.id,
                reason: format!("duplicate id {}", p.id),
            });
        }
        if let Err(reason) = p.geometry.validate() {
            out.push(Violation {
                primitive_id: p.id,
                reason,
            });
        }
        if p.geometry.is_text() {
            if p.label != annotation {
                out.push(Violation {
                    primitive_id: p.id,
                    reason: format!(
                        "text primitive has label {}, expected annotation class {annotation}",
                        p.label
                    ),
                });
            }
            if p.instance != NO_INSTANCE {
                out.push(Violation {
                    primitive_id: p.id,
                    reason: format!("text primitive has instance {}, expected -1", p.instance),
                });
            }
        }
        if p.instance >= 0 {
            match instance_label.get(&p.instance) {
                None => {
                    instance_label.insert(p.instance, p.label);
                }
                Some(&l) if l != p.label => {
                    out.push(Violation {
                        primitive_id: p.id,
                        reason: format!(
                            "instance {} used with labels {l} and {}",
                            p.instance, p.label
                        ),
                    });
                }
                _ => {}
            }
            if let Some(ClassKind::Stuff) = d.class_kind(p.label) {
                out.push(Violation {
                    primitive_id: p.id,
                    reason: format!("stuff primitive carries instance {}", p.instance),
                });
            }
        }
    }
    out
}
