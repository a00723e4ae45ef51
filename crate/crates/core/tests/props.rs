//! Property tests for the serialization, graph, and metric laws.

use std::collections::BTreeSet;

use proptest::prelude::*;

use symspot::graph::knn_neighbors;
use symspot::ingest::canonical::{parse_canonical, serialize_drawing};
use symspot::metrics::{match_symbols, panoptic_scores, weighted_iou, MatchResult};
use symspot::model::{ClassInfo, ClassKind, Drawing, Geometry, Primitive, Symbol};

fn coord() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e4..1e4f64,
        -1.0..1.0f64,
        Just(0.0),
        Just(14.0),
        Just(1e-12),
        Just(-273.15),
    ]
}

fn geometry() -> impl Strategy<Value = Geometry> {
    prop_oneof![
        (coord(), coord(), coord(), coord())
            .prop_map(|(x1, y1, x2, y2)| Geometry::Line { x1, y1, x2, y2 }),
        (coord(), coord(), 1e-6..1e3f64, -6.0..6.0f64, 1e-6..std::f64::consts::TAU)
            .prop_map(|(cx, cy, r, start, sweep)| Geometry::Arc {
                cx,
                cy,
                r,
                start,
                sweep
            }),
        (coord(), coord(), 1e-6..1e3f64).prop_map(|(cx, cy, r)| Geometry::Circle { cx, cy, r }),
        (coord(), coord(), 1e-6..1e3f64, 1e-6..1e3f64, -6.0..6.0f64).prop_map(
            |(cx, cy, a, b, rot)| {
                let (a, b) = if a >= b { (a, b) } else { (b, a) };
                Geometry::Ellipse { cx, cy, a, b, rot }
            }
        ),
        (coord(), coord(), 1e-6..1e2f64, 1e-6..1e2f64, "[a-z 0-9]{0,12}").prop_map(
            |(xmin, ymin, w, h, content)| Geometry::Text {
                xmin,
                ymin,
                xmax: xmin + w,
                ymax: ymin + h,
                content,
                rot: 0.0,
            }
        ),
    ]
}

fn drawing() -> impl Strategy<Value = Drawing> {
    prop::collection::vec(geometry(), 1..24).prop_map(|geoms| {
        let classes = vec![
            ClassInfo {
                id: 1,
                name: "thing".into(),
                kind: ClassKind::Thing,
            },
            ClassInfo {
                id: 2,
                name: "stuff".into(),
                kind: ClassKind::Stuff,
            },
        ];
        let annotation = 3;
        let prims = geoms
            .into_iter()
            .enumerate()
            .map(|(id, geometry)| {
                let (label, instance) = if geometry.is_text() {
                    (annotation, -1)
                } else if id % 3 == 0 {
                    (2, -1)
                } else {
                    (1, (id / 3) as i32)
                };
                Primitive {
                    id,
                    geometry,
                    label,
                    instance,
                }
            })
            .collect();
        Drawing::new(prims, classes)
    })
}

proptest! {
    #[test]
    fn canonical_round_trip_is_identity(d in drawing()) {
        let bytes = serialize_drawing(&d);
        let parsed = parse_canonical(&bytes).unwrap();
        prop_assert_eq!(serialize_drawing(&parsed), bytes);
    }

    #[test]
    fn knn_matches_brute_force(
        points in prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 2..200),
        k in 1usize..24,
    ) {
        let classes = vec![ClassInfo { id: 1, name: "t".into(), kind: ClassKind::Thing }];
        let prims: Vec<Primitive> = points
            .iter()
            .enumerate()
            .map(|(id, &(x, y))| Primitive {
                id,
                geometry: Geometry::Line { x1: x - 0.1, y1: y, x2: x + 0.1, y2: y },
                label: 1,
                instance: id as i32,
            })
            .collect();
        let d = Drawing::new(prims, classes);
        let table = knn_neighbors(&d, k).unwrap();
        let n = points.len();
        for i in 0..n {
            let mut expected: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            expected.sort_by(|&a, &b| {
                let dist = |j: usize| {
                    let (dx, dy) = (points[j].0 - points[i].0, points[j].1 - points[i].1);
                    dx * dx + dy * dy
                };
                dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b))
            });
            expected.truncate(k.min(n - 1));
            prop_assert_eq!(&table.neighbors[i], &expected, "row {}", i);
        }
    }

    #[test]
    fn pq_is_rq_times_sq(
        tp in 0usize..50,
        fp in 0usize..50,
        fn_ in 0usize..50,
        ious in prop::collection::vec(0.5..1.0f64, 0..50),
    ) {
        let m = MatchResult {
            tp: ious.iter().take(tp).enumerate().map(|(i, &x)| (i, i, x)).collect(),
            fp: (0..fp).collect(),
            fn_: (0..fn_).collect(),
        };
        let s = panoptic_scores(&m);
        prop_assert!((s.pq - s.rq * s.sq).abs() <= 1e-12);
        prop_assert!(s.pq <= 1.0 + 1e-12 && s.pq >= 0.0);
    }

    #[test]
    fn matching_is_optimal_on_small_partitions(
        lengths in prop::collection::vec(0.1..10.0f64, 1..12),
        gt_assign in prop::collection::vec(0usize..4, 12),
        pr_assign in prop::collection::vec(0usize..4, 12),
    ) {
        let n = lengths.len();
        let classes = vec![ClassInfo { id: 1, name: "t".into(), kind: ClassKind::Thing }];
        let prims: Vec<Primitive> = lengths
            .iter()
            .enumerate()
            .map(|(id, &l)| Primitive {
                id,
                geometry: Geometry::Line { x1: 0.0, y1: id as f64, x2: l, y2: id as f64 },
                label: 1,
                instance: 0,
            })
            .collect();
        let d = Drawing::new(prims, classes);
        let build = |assign: &[usize]| -> Vec<Symbol> {
            let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); 4];
            for i in 0..n {
                sets[assign[i]].insert(i);
            }
            sets.into_iter()
                .filter(|s| !s.is_empty())
                .enumerate()
                .map(|(z, members)| Symbol { label: 1, instance: z as i32, members })
                .collect()
        };
        let gts = build(&gt_assign[..n]);
        let preds = build(&pr_assign[..n]);
        let m = match_symbols(&preds, &gts, &d).unwrap();

        // brute-force maximum one-to-one matching over the >0.5 edges
        let mut edges = Vec::new();
        for (pi, p) in preds.iter().enumerate() {
            for (gi, g) in gts.iter().enumerate() {
                if weighted_iou(p, g, &d).unwrap() > 0.5 {
                    edges.push((pi, gi));
                }
            }
        }
        fn best(edges: &[(usize, usize)], up: u64, ug: u64) -> usize {
            let mut b = 0;
            for (i, &(p, g)) in edges.iter().enumerate() {
                if up & (1 << p) == 0 && ug & (1 << g) == 0 {
                    b = b.max(1 + best(&edges[i + 1..], up | (1 << p), ug | (1 << g)));
                }
            }
            b
        }
        prop_assert_eq!(m.tp.len(), best(&edges, 0, 0));
    }
}
