//! Synthetic floor-plan tiles with exact ground truth. Two of the symbol
//! templates share identical geometry and differ only by an adjacent text
//! tag, so text context carries real signal.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::{canonical::serialize_drawing, DatasetManifest, Split};
use crate::model::{ClassInfo, ClassKind, Drawing, DrawingMeta, Geometry, Primitive};
use crate::textint::build_corpus_stats;

pub const CLASS_DOOR: u32 = 1;
pub const CLASS_WINDOW: u32 = 2;
pub const CLASS_TABLE: u32 = 3;
pub const CLASS_UNIT_A: u32 = 4;
pub const CLASS_UNIT_B: u32 = 5;
pub const CLASS_WALL: u32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub tiles: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    /// Probability that a unit-a instance gets its text tag.
    pub text_rate: f64,
    /// Probability that a tag's content is truthful rather than noise.
    pub informativeness: f64,
    /// Background clutter lines per tile.
    pub clutter: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            tiles: 50,
            min_symbols: 6,
            max_symbols: 10,
            text_rate: 1.0,
            informativeness: 0.9,
            clutter: 3,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

pub fn synth_classes() -> Vec<ClassInfo> {
    let thing = |id, name: &str| ClassInfo {
        id,
        name: name.into(),
        kind: ClassKind::Thing,
    };
    vec![
        thing(CLASS_DOOR, "door"),
        thing(CLASS_WINDOW, "window"),
        thing(CLASS_TABLE, "table"),
        thing(CLASS_UNIT_A, "unit-a"),
        thing(CLASS_UNIT_B, "unit-b"),
        ClassInfo {
            id: CLASS_WALL,
            name: "wall".into(),
            kind: ClassKind::Stuff,
        },
    ]
}

const TILE: f64 = 14.0;

fn template(class: u32) -> Vec<Geometry> {
    match class {
        CLASS_DOOR => vec![
            Geometry::Arc {
                cx: 0.0,
                cy: 0.0,
                r: 0.8,
                start: 0.0,
                sweep: std::f64::consts::FRAC_PI_2,
            },
            Geometry::Line {
                x1: 0.0,
                y1: 0.0,
                x2: 0.8,
                y2: 0.0,
            },
        ],
        CLASS_WINDOW => (0..3)
            .map(|i| Geometry::Line {
                x1: -0.5,
                y1: 0.1 * i as f64 - 0.1,
                x2: 0.5,
                y2: 0.1 * i as f64 - 0.1,
            })
            .collect(),
        CLASS_TABLE => vec![
            Geometry::Circle {
                cx: 0.0,
                cy: 0.0,
                r: 0.4,
            },
            Geometry::Line {
                x1: -0.4,
                y1: 0.0,
                x2: 0.4,
                y2: 0.0,
            },
        ],
        // unit-a and unit-b are deliberately the same square; only the text
        // tag placed next to unit-a tells them apart
        CLASS_UNIT_A | CLASS_UNIT_B => {
            let h = 0.4;
            vec![
                Geometry::Line {
                    x1: -h,
                    y1: -h,
                    x2: h,
                    y2: -h,
                },
                Geometry::Line {
                    x1: h,
                    y1: -h,
                    x2: h,
                    y2: h,
                },
                Geometry::Line {
                    x1: h,
                    y1: h,
                    x2: -h,
                    y2: h,
                },
                Geometry::Line {
                    x1: -h,
                    y1: h,
                    x2: -h,
                    y2: -h,
                },
            ]
        }
        other => panic!("no template for class {other}"),
    }
}

/// Deterministic tile: the same (config, index) pair always produces the
/// same drawing, independent of any other tiles generated.
pub fn generate_tile(cfg: &SynthConfig, index: usize) -> Drawing {
    let seed = cfg
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let annotation = 7u32; // max class id 6 + 1

    let mut prims: Vec<Primitive> = Vec::new();
    let push = |prims: &mut Vec<Primitive>, geometry: Geometry, label: u32, instance: i32| {
        prims.push(Primitive {
            id: prims.len(),
            geometry,
            label,
            instance,
        });
    };

    // perimeter walls, inset 0.5 m
    let (lo, hi) = (0.5, TILE - 0.5);
    for (x1, y1, x2, y2) in [
        (lo, lo, hi, lo),
        (hi, lo, hi, hi),
        (hi, hi, lo, hi),
        (lo, hi, lo, lo),
    ] {
        push(
            &mut prims,
            Geometry::Line { x1, y1, x2, y2 },
            CLASS_WALL,
            -1,
        );
    }
    // one interior wall
    let wx = rng.gen_range(4.0..10.0);
    push(
        &mut prims,
        Geometry::Line {
            x1: wx,
            y1: lo,
            x2: wx,
            y2: hi,
        },
        CLASS_WALL,
        -1,
    );

    // jittered 4x4 grid keeps instances well separated
    let mut cells: Vec<(usize, usize)> = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
    cells.shuffle(&mut rng);
    let count = rng.gen_range(cfg.min_symbols..=cfg.max_symbols.min(cells.len()));
    let mut texts: Vec<Geometry> = Vec::new();
    for z in 0..count {
        let (ci, cj) = cells[z];
        let cx = 2.5 + 3.0 * ci as f64 + rng.gen_range(-0.6..0.6);
        let cy = 2.5 + 3.0 * cj as f64 + rng.gen_range(-0.6..0.6);
        let class = [
            CLASS_DOOR,
            CLASS_WINDOW,
            CLASS_TABLE,
            CLASS_UNIT_A,
            CLASS_UNIT_B,
        ][rng.gen_range(0..5)];
        let quarter = rng.gen_range(0..4) as f64 * std::f64::consts::FRAC_PI_2;
        for g in template(class) {
            push(
                &mut prims,
                g.rotate(quarter, 0.0, 0.0).translate(cx, cy),
                class,
                z as i32,
            );
        }
        if class == CLASS_UNIT_A && rng.gen_bool(cfg.text_rate) {
            let content = if rng.gen_bool(cfg.informativeness) {
                format!("unit {}", rng.gen_range(1..40))
            } else {
                ["storage", "wc", "hall"][rng.gen_range(0..3)].to_string()
            };
            texts.push(Geometry::Text {
                xmin: cx - 0.3,
                ymin: cy + 0.55,
                xmax: cx + 0.3,
                ymax: cy + 0.85,
                content,
                rot: 0.0,
            });
        }
    }
    // one generic room label so text is not a perfect class giveaway
    let rx = rng.gen_range(1.5..12.0);
    let ry = rng.gen_range(1.5..12.0);
    texts.push(Geometry::Text {
        xmin: rx,
        ymin: ry,
        xmax: rx + 0.8,
        ymax: ry + 0.3,
        content: format!("room {}", rng.gen_range(100..120)),
        rot: 0.0,
    });
    for t in texts {
        push(&mut prims, t, annotation, -1);
    }

    // background clutter
    for _ in 0..cfg.clutter {
        let x = rng.gen_range(1.0..13.0);
        let y = rng.gen_range(1.0..13.0);
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let len = rng.gen_range(0.2..0.5);
        push(
            &mut prims,
            Geometry::Line {
                x1: x,
                y1: y,
                x2: x + len * ang.cos(),
                y2: y + len * ang.sin(),
            },
            0,
            -1,
        );
    }

    let mut d = Drawing::new(prims, synth_classes());
    d.meta = DrawingMeta {
        source: Some(format!("synth-{index}")),
        origin: (0.0, 0.0),
        tile_size: TILE,
        id_remap: None,
    };
    d
}

pub fn split_for_index(cfg: &SynthConfig, index: usize) -> Split {
    // trailing blocks get val and test so the counts are exact
    let test_count = (cfg.tiles as f64 * cfg.test_fraction).round() as usize;
    let val_count = (cfg.tiles as f64 * cfg.val_fraction).round() as usize;
    if index >= cfg.tiles - test_count {
        Split::Test
    } else if index >= cfg.tiles - test_count - val_count {
        Split::Val
    } else {
        Split::Train
    }
}

/// Write the whole dataset under `dir`: tiles/, manifest.json, and corpus
/// statistics gathered from the training split only.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("tiles"))?;
    let mut tiles = Vec::new();
    let mut train_drawings = Vec::new();
    for i in 0..cfg.tiles {
        let d = generate_tile(cfg, i);
        let rel = format!("tiles/tile_{i:04}.json");
        std::fs::write(dir.join(&rel), serialize_drawing(&d))?;
        let split = split_for_index(cfg, i);
        if split == Split::Train {
            train_drawings.push(d);
        }
        tiles.push((rel, split));
    }
    let stats = build_corpus_stats(&train_drawings);
    std::fs::write(dir.join("stats.tsv"), stats.to_text())?;
    let manifest = DatasetManifest {
        tiles,
        classes: synth_classes(),
        stats_path: Some("stats.tsv".into()),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::canonical::parse_canonical;
    use crate::ingest::normalize_coords;
    use crate::metrics::{ground_truth_symbols, match_symbols, panoptic_scores};
    use crate::model::validate_drawing;

    #[test]
    fn tiles_are_deterministic_and_distinct() {
        let cfg = SynthConfig::default();
        let a = serialize_drawing(&generate_tile(&cfg, 3));
        let b = serialize_drawing(&generate_tile(&cfg, 3));
        assert_eq!(a, b);
        let c = serialize_drawing(&generate_tile(&cfg, 4));
        assert_ne!(a, c);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 8;
        let d = serialize_drawing(&generate_tile(&cfg2, 3));
        assert_ne!(a, d);
    }

    #[test]
    fn generated_tiles_validate_clean() {
        let cfg = SynthConfig::default();
        for i in 0..10 {
            let d = generate_tile(&cfg, i);
            let v = validate_drawing(&d);
            assert!(v.is_empty(), "tile {i}: {v:?}");
        }
    }

    #[test]
    fn ground_truth_self_evaluates_to_one() {
        let cfg = SynthConfig::default();
        for i in 0..5 {
            let d = generate_tile(&cfg, i);
            let gts = ground_truth_symbols(&d);
            assert!(!gts.is_empty());
            let m = match_symbols(&gts, &gts, &d).unwrap();
            let s = panoptic_scores(&m);
            assert_eq!((s.pq, s.rq, s.sq), (1.0, 1.0, 1.0), "tile {i}");
        }
    }

    #[test]
    fn unit_a_always_tagged_at_full_rate() {
        let cfg = SynthConfig {
            text_rate: 1.0,
            ..Default::default()
        };
        let mut seen_a = 0;
        for i in 0..20 {
            let d = generate_tile(&cfg, i);
            for p in &d.primitives {
                if p.label == CLASS_UNIT_A {
                    let (cx, cy) = p.center();
                    let tagged = d.primitives.iter().any(|t| {
                        t.geometry.is_text() && {
                            let (tx, ty) = t.center();
                            ((tx - cx).powi(2) + (ty - cy).powi(2)).sqrt() < 1.8
                        }
                    });
                    assert!(tagged, "tile {i} primitive {} untagged", p.id);
                    seen_a += 1;
                }
            }
        }
        assert!(seen_a > 0);
    }

    #[test]
    fn unit_templates_share_geometry() {
        let a = template(CLASS_UNIT_A);
        let b = template(CLASS_UNIT_B);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn splits_follow_fractions() {
        let cfg = SynthConfig {
            tiles: 40,
            ..Default::default()
        };
        let counts = (0..40).map(|i| split_for_index(&cfg, i)).fold(
            (0, 0, 0),
            |(tr, va, te), s| match s {
                Split::Train => (tr + 1, va, te),
                Split::Val => (tr, va + 1, te),
                Split::Test => (tr, va, te + 1),
            },
        );
        assert_eq!(counts, (32, 4, 4));
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            tiles: 12,
            ..Default::default()
        };
        let manifest = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.tiles.len(), 12);
        assert!(manifest.paths(Split::Train).count() >= 8);
        for (rel, _) in &manifest.tiles {
            let bytes = std::fs::read(dir.path().join(rel)).unwrap();
            let parsed = parse_canonical(&bytes).unwrap();
            let idx: usize = rel
                .trim_start_matches("tiles/tile_")
                .trim_end_matches(".json")
                .parse()
                .unwrap();
            assert_eq!(serialize_drawing(&parsed), serialize_drawing(&generate_tile(&cfg, idx)));
        }
        let stats = std::fs::read_to_string(dir.path().join("stats.tsv")).unwrap();
        assert!(stats.contains("room"));
    }

    #[test]
    fn normalized_tiles_fit_unit_square() {
        let cfg = SynthConfig::default();
        let d = normalize_coords(&generate_tile(&cfg, 0)).unwrap();
        for p in &d.primitives {
            let (x, y) = p.center();
            assert!((-0.01..=1.01).contains(&x) && (-0.01..=1.01).contains(&y));
        }
    }
}
