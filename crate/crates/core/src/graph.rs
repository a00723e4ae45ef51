//! k-nearest-neighbor primitive graph and the typed edge feature tensor
//! E = (t ‖ e) of shape N x k x 8.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::model::{Drawing, Primitive};

pub const EDGE_CHANNELS: usize = 8;

/// Per-node ordered neighbor lists, nearest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    pub k: usize,
    /// neighbors[i] has length min(k, N-1)
    pub neighbors: Vec<Vec<usize>>,
}

impl NeighborTable {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Neighbors by Euclidean distance between primitive centers; ties broken by
/// smaller id. Text primitives participate as ordinary nodes.
pub fn knn_neighbors(tile: &Drawing, k: usize) -> Result<NeighborTable> {
    let n = tile.len();
    if n < 2 {
        return Err(Error::GraphTooSmall(n));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let centers: Vec<(f64, f64)> = tile.primitives.iter().map(|p| p.center()).collect();
    let keff = k.min(n - 1);
    let mut neighbors = Vec::with_capacity(n);
    for i in 0..n {
        let (xi, yi) = centers[i];
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let (xj, yj) = centers[j];
                ((xj - xi).powi(2) + (yj - yi).powi(2), j)
            })
            .collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        neighbors.push(cand.into_iter().take(keff).map(|(_, j)| j).collect());
    }
    Ok(NeighborTable { k, neighbors })
}

/// Node-pair category: 0 geo-geo, 1 geo-text (either order), 2 text-text.
pub fn pair_type_indicator(a: &Primitive, b: &Primitive) -> u8 {
    match (a.geometry.is_text(), b.geometry.is_text()) {
        (false, false) => 0,
        (true, true) => 2,
        _ => 1,
    }
}

/// The 7 geometric edge channels for the ordered pair (a, b):
/// [dx, dy, rho, sin theta, cos theta, orientation difference, log-length delta].
pub fn geometric_edge_vector(a: &Primitive, b: &Primitive) -> [f64; 7] {
    let (xa, ya) = a.center();
    let (xb, yb) = b.center();
    let dx = xb - xa;
    let dy = yb - ya;
    let rho = dx.hypot(dy);
    let (sin_t, cos_t) = if rho > 0.0 {
        let theta = dy.atan2(dx);
        (theta.sin(), theta.cos())
    } else {
        (0.0, 1.0) // degenerate direction fixed to theta = 0
    };
    // orientations are axis-like (mod pi); fold the difference into [0, pi/2]
    let d = (a.geometry.orientation() - b.geometry.orientation()).rem_euclid(std::f64::consts::PI);
    let dalpha = d.min(std::f64::consts::PI - d) / FRAC_PI_2;
    let lambda = (1.0 + b.length()).ln() - (1.0 + a.length()).ln();
    [dx, dy, rho, sin_t, cos_t, dalpha, lambda]
}

/// Edge features for every (node, neighbor slot): channel 0 is the type
/// indicator, channels 1..7 the geometric vector. Slots beyond the node's
/// real neighbor count are zero-filled and flagged in `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTensor {
    pub n: usize,
    pub k: usize,
    /// row-major [n][k][8]
    pub data: Vec<f64>,
    /// mask[i*k + j] is true for real neighbor slots
    pub mask: Vec<bool>,
}

impl EdgeTensor {
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.k + j) * EDGE_CHANNELS;
        &self.data[base..base + EDGE_CHANNELS]
    }

    /// Binary dump: header (N, k, 8 as little-endian u32) + f32 row-major payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(EDGE_CHANNELS as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }
}

pub fn build_edge_tensor(tile: &Drawing, nbrs: &NeighborTable) -> Result<EdgeTensor> {
    let n = tile.len();
    if nbrs.len() != n {
        return Err(Error::shape("build_edge_tensor", &[n], &[nbrs.len()]));
    }
    let k = nbrs.k;
    let mut data = vec![0.0; n * k * EDGE_CHANNELS];
    let mut mask = vec![false; n * k];
    for (i, row) in nbrs.neighbors.iter().enumerate() {
        for (j, &nbr) in row.iter().enumerate() {
            let a = &tile.primitives[i];
            let b = &tile.primitives[nbr];
            let base = (i * k + j) * EDGE_CHANNELS;
            data[base] = pair_type_indicator(a, b) as f64;
            data[base + 1..base + 8].copy_from_slice(&geometric_edge_vector(a, b));
            mask[i * k + j] = true;
        }
    }
    Ok(EdgeTensor { n, k, data, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassInfo, ClassKind, Geometry};

    fn classes() -> Vec<ClassInfo> {
        vec![ClassInfo {
            id: 1,
            name: "door".into(),
            kind: ClassKind::Thing,
        }]
    }

    fn point_prim(id: usize, x: f64, y: f64) -> Primitive {
        Primitive {
            id,
            geometry: Geometry::Line {
                x1: x - 0.05,
                y1: y,
                x2: x + 0.05,
                y2: y,
            },
            label: 1,
            instance: 0,
        }
    }

    fn text_prim(id: usize, x: f64, y: f64) -> Primitive {
        Primitive {
            id,
            geometry: Geometry::Text {
                xmin: x - 0.05,
                ymin: y - 0.05,
                xmax: x + 0.05,
                ymax: y + 0.05,
                content: "wc".into(),
                rot: 0.0,
            },
            label: 2,
            instance: -1,
        }
    }

    #[test]
    fn nearest_on_a_line() {
        let tile = Drawing::new(
            vec![
                point_prim(0, 0.0, 0.0),
                point_prim(1, 1.0, 0.0),
                point_prim(2, 5.0, 0.0),
            ],
            classes(),
        );
        let t = knn_neighbors(&tile, 1).unwrap();
        assert_eq!(t.neighbors[0], vec![1]);
        assert_eq!(t.neighbors[2], vec![1]);
    }

    #[test]
    fn k_at_least_n_gives_all_others() {
        let tile = Drawing::new(
            vec![
                point_prim(0, 0.0, 0.0),
                point_prim(1, 1.0, 0.0),
                point_prim(2, 3.0, 0.0),
            ],
            classes(),
        );
        let t = knn_neighbors(&tile, 10).unwrap();
        assert_eq!(t.neighbors[0], vec![1, 2]);
        assert_eq!(t.neighbors[1], vec![0, 2]);
        assert_eq!(t.neighbors[2], vec![1, 0]);
    }

    #[test]
    fn too_small_graph_errors() {
        let tile = Drawing::new(vec![point_prim(0, 0.0, 0.0)], classes());
        assert!(matches!(
            knn_neighbors(&tile, 1),
            Err(Error::GraphTooSmall(1))
        ));
    }

    /// brute-force oracle: all-pairs sort with the same tie rule
    fn brute_force_knn(tile: &Drawing, k: usize) -> Vec<Vec<usize>> {
        let n = tile.len();
        let centers: Vec<(f64, f64)> = tile.primitives.iter().map(|p| p.center()).collect();
        (0..n)
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let d = (centers[j].0 - centers[i].0).hypot(centers[j].1 - centers[i].1);
                        (d, j)
                    })
                    .collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                all.into_iter().take(k.min(n - 1)).map(|(_, j)| j).collect()
            })
            .collect()
    }

    #[test]
    fn knn_matches_brute_force_on_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let prims: Vec<Primitive> = (0..100)
            .map(|i| point_prim(i, rng.gen::<f64>() * 10.0, rng.gen::<f64>() * 10.0))
            .collect();
        let tile = Drawing::new(prims, classes());
        let t = knn_neighbors(&tile, 16).unwrap();
        assert_eq!(t.neighbors, brute_force_knn(&tile, 16));
    }

    #[test]
    fn type_indicator_categories() {
        let line = point_prim(0, 0.0, 0.0);
        let arc = Primitive {
            id: 1,
            geometry: Geometry::Arc {
                cx: 0.0,
                cy: 0.0,
                r: 1.0,
                start: 0.0,
                sweep: 1.0,
            },
            label: 1,
            instance: 0,
        };
        let text = text_prim(2, 1.0, 1.0);
        assert_eq!(pair_type_indicator(&line, &arc), 0);
        assert_eq!(pair_type_indicator(&arc, &text), 1);
        assert_eq!(pair_type_indicator(&text, &line), 1);
        assert_eq!(pair_type_indicator(&text, &text_prim(3, 2.0, 2.0)), 2);
    }

    #[test]
    fn type_indicator_symmetric() {
        let a = point_prim(0, 0.0, 0.0);
        let b = text_prim(1, 1.0, 0.0);
        assert_eq!(pair_type_indicator(&a, &b), pair_type_indicator(&b, &a));
    }

    #[test]
    fn coincident_edge_vector() {
        let a = point_prim(0, 0.3, 0.4);
        let e = geometric_edge_vector(&a, &a);
        assert_eq!(e, [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_east_edge_vector() {
        let a = point_prim(0, 0.0, 0.0);
        let b = point_prim(1, 1.0, 0.0);
        let e = geometric_edge_vector(&a, &b);
        let expect = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        for (got, want) in e.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12, "{e:?}");
        }
    }

    #[test]
    fn swap_negates_antisymmetric_channels() {
        let a = point_prim(0, 0.1, 0.2);
        let mut b = point_prim(1, 0.8, 0.5);
        // give b a different length and orientation
        b.geometry = Geometry::Line {
            x1: 0.5,
            y1: 0.5,
            x2: 1.1,
            y2: 0.9,
        };
        let eab = geometric_edge_vector(&a, &b);
        let eba = geometric_edge_vector(&b, &a);
        assert!((eab[0] + eba[0]).abs() < 1e-12);
        assert!((eab[1] + eba[1]).abs() < 1e-12);
        assert!((eab[6] + eba[6]).abs() < 1e-12);
        assert!((eab[2] - eba[2]).abs() < 1e-12);
        assert!((eab[5] - eba[5]).abs() < 1e-12);
    }

    #[test]
    fn sin_cos_identity_and_translation_invariance() {
        let a = point_prim(0, 0.3, -0.2);
        let b = point_prim(1, 1.4, 0.9);
        let e = geometric_edge_vector(&a, &b);
        assert!((e[3] * e[3] + e[4] * e[4] - 1.0).abs() < 1e-12);
        let at = Primitive {
            geometry: a.geometry.translate(5.0, -3.0),
            ..a.clone()
        };
        let bt = Primitive {
            geometry: b.geometry.translate(5.0, -3.0),
            ..b.clone()
        };
        let et = geometric_edge_vector(&at, &bt);
        for (x, y) in e.iter().zip(et.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn edge_tensor_shape_and_padding() {
        let tile = Drawing::new(
            vec![point_prim(0, 0.0, 0.0), point_prim(1, 1.0, 0.0)],
            classes(),
        );
        let nbrs = knn_neighbors(&tile, 4).unwrap();
        let e = build_edge_tensor(&tile, &nbrs).unwrap();
        assert_eq!(e.data.len(), 2 * 4 * 8);
        let real: usize = e.mask.iter().filter(|&&m| m).count();
        assert_eq!(real, 2); // 1 real neighbor each, 3 of 4 slots masked
    }

    #[test]
    fn coincident_text_rows() {
        let tile = Drawing::new(
            vec![
                text_prim(0, 0.5, 0.5),
                text_prim(1, 0.5, 0.5),
                text_prim(2, 0.5, 0.5),
            ],
            classes(),
        );
        let nbrs = knn_neighbors(&tile, 2).unwrap();
        let e = build_edge_tensor(&tile, &nbrs).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let row = e.at(i, j);
                assert_eq!(row[0], 2.0);
                assert_eq!(&row[1..], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn binary_dump_header() {
        let tile = Drawing::new(
            vec![point_prim(0, 0.0, 0.0), point_prim(1, 1.0, 0.0)],
            classes(),
        );
        let nbrs = knn_neighbors(&tile, 2).unwrap();
        let e = build_edge_tensor(&tile, &nbrs).unwrap();
        let bytes = e.to_bytes();
        assert_eq!(&bytes[0..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &8u32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 2 * 2 * 8 * 4);
    }
}
