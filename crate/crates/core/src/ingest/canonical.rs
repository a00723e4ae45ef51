//! The canonical line-oriented JSON drawing format.
//!
//! Serialization is deterministic: fixed field order, classes and primitives
//! sorted by id, floats printed in shortest round-trip form. parse ∘
//! serialize is the identity on valid drawings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassInfo, Drawing, DrawingMeta, Geometry, Primitive};

#[derive(Serialize, Deserialize)]
struct CanonDoc {
    classes: Vec<ClassInfo>,
    primitives: Vec<CanonPrimitive>,
    meta: CanonMeta,
}

#[derive(Serialize, Deserialize)]
struct CanonPrimitive {
    id: usize,
    #[serde(flatten)]
    geometry: Geometry,
    label: u32,
    instance: i32,
}

#[derive(Serialize, Deserialize, Default)]
struct CanonMeta {
    origin: [f64; 2],
    tile_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id_remap: Option<Vec<usize>>,
}

/// Byte offset of a 1-based (line, column) position in `bytes`.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut remaining = line.saturating_sub(1);
    let mut offset = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if remaining == 0 {
            return (i + column.saturating_sub(1)).min(bytes.len());
        }
        if b == b'\n' {
            remaining -= 1;
            offset = i + 1;
        }
    }
    (offset + column.saturating_sub(1)).min(bytes.len())
}

pub fn parse_canonical(bytes: &[u8]) -> Result<Drawing> {
    let doc: CanonDoc = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        reason: e.to_string(),
    })?;

    let mut classes = doc.classes;
    classes.sort_by_key(|c| c.id);
    for w in classes.windows(2) {
        if w[0].id == w[1].id {
            return Err(Error::Schema(format!("duplicate class id {}", w[0].id)));
        }
    }
    if classes.iter().any(|c| c.id == 0) {
        return Err(Error::Schema("class id 0 is reserved for background".into()));
    }

    let mut primitives = Vec::with_capacity(doc.primitives.len());
    for (pos, cp) in doc.primitives.into_iter().enumerate() {
        if cp.id != pos {
            return Err(Error::Schema(format!(
                "primitive id {} at position {pos}: ids must be dense in file order",
                cp.id
            )));
        }
        cp.geometry
            .validate()
            .map_err(|reason| Error::Schema(format!("primitive {}: {reason}", cp.id)))?;
        primitives.push(Primitive {
            id: cp.id,
            geometry: cp.geometry,
            label: cp.label,
            instance: cp.instance,
        });
    }

    let drawing = Drawing {
        primitives,
        classes,
        meta: DrawingMeta {
            source: doc.meta.source,
            origin: (doc.meta.origin[0], doc.meta.origin[1]),
            tile_size: doc.meta.tile_size,
            id_remap: doc.meta.id_remap,
        },
    };

    // label ids must be background, a table entry, or the annotation class
    let annotation = drawing.annotation_label();
    for p in &drawing.primitives {
        let known = p.label == 0
            || p.label == annotation
            || drawing.classes.iter().any(|c| c.id == p.label);
        if !known {
            return Err(Error::Schema(format!(
                "primitive {}: unknown class id {}",
                p.id, p.label
            )));
        }
    }
    Ok(drawing)
}

pub fn serialize_drawing(d: &Drawing) -> Vec<u8> {
    let mut classes = d.classes.clone();
    classes.sort_by_key(|c| c.id);
    let doc = CanonDoc {
        classes,
        primitives: d
            .primitives
            .iter()
            .map(|p| CanonPrimitive {
                id: p.id,
                geometry: p.geometry.clone(),
                label: p.label,
                instance: p.instance,
            })
            .collect(),
        meta: CanonMeta {
            origin: [d.meta.origin.0, d.meta.origin.1],
            tile_size: d.meta.tile_size,
            source: d.meta.source.clone(),
            id_remap: d.meta.id_remap.clone(),
        },
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("serialization cannot fail");
    out.push(b'\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClassKind;

    fn sample() -> Drawing {
        let classes = vec![ClassInfo {
            id: 1,
            name: "door".into(),
            kind: ClassKind::Thing,
        }];
        Drawing::new(
            vec![
                Primitive {
                    id: 0,
                    geometry: Geometry::Line {
                        x1: 0.0,
                        y1: 0.0,
                        x2: 1.5,
                        y2: 0.25,
                    },
                    label: 1,
                    instance: 0,
                },
                Primitive {
                    id: 1,
                    geometry: Geometry::Line {
                        x1: 1.0,
                        y1: 0.0,
                        x2: 1.0,
                        y2: 2.0,
                    },
                    label: 1,
                    instance: 0,
                },
                Primitive {
                    id: 2,
                    geometry: Geometry::Text {
                        xmin: 0.0,
                        ymin: 0.0,
                        xmax: 1.0,
                        ymax: 0.5,
                        content: "wc".into(),
                        rot: 0.0,
                    },
                    label: 2,
                    instance: -1,
                },
            ],
            classes,
        )
    }

    #[test]
    fn roundtrip_identity() {
        let d = sample();
        let bytes = serialize_drawing(&d);
        let back = parse_canonical(&bytes).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn serialize_deterministic() {
        let d = sample();
        assert_eq!(serialize_drawing(&d), serialize_drawing(&d));
    }

    #[test]
    fn empty_drawing_valid() {
        let d = Drawing::new(vec![], vec![]);
        let back = parse_canonical(&serialize_drawing(&d)).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn text_carries_pseudo_class() {
        let d = sample();
        let back = parse_canonical(&serialize_drawing(&d)).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.primitives[2].label, back.annotation_label());
    }

    #[test]
    fn duplicate_id_rejected() {
        let mut d = sample();
        d.primitives[1].id = 0;
        let bytes = serialize_drawing(&d);
        assert!(matches!(parse_canonical(&bytes), Err(Error::Schema(_))));
    }

    #[test]
    fn malformed_syntax_reports_offset() {
        let err = parse_canonical(b"{\"classes\": [}").unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset > 0 && offset <= 14),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_class_rejected() {
        let mut d = sample();
        d.primitives[0].label = 9;
        let bytes = serialize_drawing(&d);
        assert!(matches!(parse_canonical(&bytes), Err(Error::Schema(_))));
    }
}
