//! Turning per-primitive predictions into symbols: shift centers by the
//! predicted offsets, cluster things per class, group stuff per class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::symbols_from_labels;
use crate::model::{ClassKind, Drawing, Symbol};
use crate::network::{prepare_tile, Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotConfig {
    /// Single-linkage merge radius in normalized tile coordinates.
    pub cluster_radius: f64,
}

impl Default for SpotConfig {
    fn default() -> Self {
        SpotConfig {
            cluster_radius: 0.02,
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so ids are order-independent
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Shift each primitive center by its predicted offset.
pub fn shift_centers(centers: &[(f64, f64)], offsets: &[(f64, f64)]) -> Vec<(f64, f64)> {
    centers
        .iter()
        .zip(offsets)
        .map(|(&(x, y), &(dx, dy))| (x + dx, y + dy))
        .collect()
}

/// Per-class single-linkage clustering of the shifted centers. Primitives
/// whose label is not a thing get instance -1. Instance ids are dense and
/// assigned in order of the smallest member index.
pub fn cluster_instances<F: Fn(u32) -> bool>(
    labels: &[u32],
    shifted: &[(f64, f64)],
    is_thing: F,
    radius: f64,
) -> Vec<i32> {
    let n = labels.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        if !is_thing(labels[i]) {
            continue;
        }
        for j in (i + 1)..n {
            if labels[j] != labels[i] {
                continue;
            }
            let (dx, dy) = (shifted[i].0 - shifted[j].0, shifted[i].1 - shifted[j].1);
            if (dx * dx + dy * dy).sqrt() <= radius {
                uf.union(i, j);
            }
        }
    }
    let mut next = 0i32;
    let mut root_id: std::collections::BTreeMap<usize, i32> = Default::default();
    let mut out = vec![-1i32; n];
    for i in 0..n {
        if !is_thing(labels[i]) {
            continue;
        }
        let r = uf.find(i);
        let id = *root_id.entry(r).or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
        out[i] = id;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpottingResult {
    pub labels: Vec<u32>,
    pub instances: Vec<i32>,
    #[serde(skip)]
    pub symbols: Vec<Symbol>,
}

impl SpottingResult {
    /// Symbols for evaluation, excluding background.
    pub fn build_symbols(labels: &[u32], instances: &[i32]) -> Vec<Symbol> {
        symbols_from_labels(labels, instances)
            .into_iter()
            .filter(|s| s.label != 0)
            .collect()
    }

    /// Deterministic JSON: per-primitive id, label, instance.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Row {
            id: usize,
            label: u32,
            instance: i32,
        }
        let rows: Vec<Row> = self
            .labels
            .iter()
            .zip(&self.instances)
            .enumerate()
            .map(|(id, (&label, &instance))| Row {
                id,
                label,
                instance,
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&serde_json::json!({ "primitives": rows }))
            .expect("serialization cannot fail");
        s.push('\n');
        s
    }

    /// Parse the per-primitive row format produced by [`to_json`]. Rows must be
    /// listed in primitive order. Symbols are not reconstructed.
    ///
    /// [`to_json`]: SpottingResult::to_json
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            id: usize,
            label: u32,
            instance: i32,
        }
        #[derive(Deserialize)]
        struct File {
            primitives: Vec<Row>,
        }
        let file: File = serde_json::from_slice(bytes)
            .map_err(|e| Error::Schema(format!("bad prediction file: {e}")))?;
        let mut labels = Vec::with_capacity(file.primitives.len());
        let mut instances = Vec::with_capacity(file.primitives.len());
        for (i, row) in file.primitives.iter().enumerate() {
            if row.id != i {
                return Err(Error::Schema(format!(
                    "prediction row {i} has id {}, expected {i}",
                    row.id
                )));
            }
            labels.push(row.label);
            instances.push(row.instance);
        }
        Ok(Self {
            labels,
            instances,
            symbols: Vec::new(),
        })
    }
}

/// Full inference on a normalized tile: network forward, semantic argmax,
/// offset shift, per-class clustering, symbol assembly.
pub fn spot(model: &Model, tile: &Drawing, spot_cfg: &SpotConfig) -> Result<SpottingResult> {
    let inputs = prepare_tile(tile, &model.cfg)?;
    let (labels, offsets) = model.predict(&inputs)?;
    spot_from_predictions(tile, &model.cfg, &inputs.centers, &labels, &offsets, spot_cfg)
}

/// Clustering and assembly given already-computed predictions; used by tests
/// with oracle offsets and by [`spot`].
pub fn spot_from_predictions(
    tile: &Drawing,
    cfg: &ModelConfig,
    centers: &[(f64, f64)],
    labels: &[u32],
    offsets: &[(f64, f64)],
    spot_cfg: &SpotConfig,
) -> Result<SpottingResult> {
    let annotation = (cfg.num_classes - 1) as u32;
    let is_thing = |l: u32| {
        l != 0 && l != annotation && matches!(tile.class_kind(l), Some(ClassKind::Thing) | None)
    };
    let shifted = shift_centers(centers, offsets);
    let instances = cluster_instances(labels, &shifted, is_thing, spot_cfg.cluster_radius);
    let symbols = SpottingResult::build_symbols(labels, &instances);
    Ok(SpottingResult {
        labels: labels.to_vec(),
        instances,
        symbols,
    })
}
