//! Drawing ingestion: canonical file format, best-effort SVG import, tiling
//! into square blocks, and tile coordinate normalization.

pub mod canonical;
mod svg;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Drawing, Primitive};

pub use canonical::{parse_canonical, serialize_drawing};
pub use svg::parse_svg_subset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    CanonicalJson,
    SvgSubset,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical-json" => Ok(Format::CanonicalJson),
            "svg-subset" => Ok(Format::SvgSubset),
            other => Err(Error::Config(format!("unknown format '{other}'"))),
        }
    }
}

/// An input element the parser could not map to one of the five primitive
/// kinds. Reported, never silently dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedElement {
    pub element: String,
    pub reason: String,
}

impl std::fmt::Display for SkippedElement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "<{}>: {}", self.element, self.reason)
    }
}

/// Parse a drawing in the declared format. The skip list is always empty for
/// canonical-json.
pub fn parse_drawing(bytes: &[u8], format: Format) -> Result<(Drawing, Vec<SkippedElement>)> {
    match format {
        Format::CanonicalJson => Ok((parse_canonical(bytes)?, Vec::new())),
        Format::SvgSubset => parse_svg_subset(bytes),
    }
}

/// Square tiling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub tile_size: f64,
    /// Grid origin is snapped down to a multiple of this (0 = use the extent
    /// minimum directly).
    pub origin_snap: f64,
    pub overlap: f64,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec {
            tile_size: 14.0,
            origin_snap: 0.0,
            overlap: 0.0,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size <= 0.0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        if self.overlap < 0.0 || self.overlap >= self.tile_size {
            return Err(Error::Config("overlap must be in [0, tile_size)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Index of a generated or ingested dataset on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tiles: Vec<(String, Split)>,
    pub classes: Vec<crate::model::ClassInfo>,
    pub stats_path: Option<String>,
}

impl DatasetManifest {
    pub fn paths(&self, split: Split) -> impl Iterator<Item = &str> {
        self.tiles
            .iter()
            .filter(move |(_, s)| *s == split)
            .map(|(p, _)| p.as_str())
    }
}

/// Split a drawing into square tiles. Membership is by primitive center;
/// with overlap > 0 a primitive lands in every tile whose expanded bounds
/// contain its center. Instances straddling a boundary split per tile and
/// get tile-local instance indices.
pub fn tile_drawing(d: &Drawing, spec: &TileSpec) -> Result<Vec<Drawing>> {
    spec.validate()?;
    if d.is_empty() {
        return Ok(Vec::new());
    }
    let centers: Vec<(f64, f64)> = d.primitives.iter().map(|p| p.center()).collect();
    let (mut minx, mut miny) = (f64::INFINITY, f64::INFINITY);
    for &(x, y) in &centers {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Numeric("non-finite primitive center".into()));
        }
        minx = minx.min(x);
        miny = miny.min(y);
    }
    let snap = |v: f64| {
        if spec.origin_snap > 0.0 {
            (v / spec.origin_snap).floor() * spec.origin_snap
        } else {
            v
        }
    };
    let (gx0, gy0) = (snap(minx), snap(miny));
    let size = spec.tile_size;

    // (tile_ix, tile_iy) -> primitive positions
    let mut buckets: std::collections::BTreeMap<(i64, i64), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (pos, &(x, y)) in centers.iter().enumerate() {
        let ix = ((x - gx0) / size).floor() as i64;
        let iy = ((y - gy0) / size).floor() as i64;
        if spec.overlap == 0.0 {
            buckets.entry((ix, iy)).or_default().push(pos);
        } else {
            // check the 3x3 neighborhood of candidate tiles
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    let (tx, ty) = (ix + dx, iy + dy);
                    let (ox, oy) = (gx0 + tx as f64 * size, gy0 + ty as f64 * size);
                    if x >= ox - spec.overlap
                        && x < ox + size + spec.overlap
                        && y >= oy - spec.overlap
                        && y < oy + size + spec.overlap
                    {
                        buckets.entry((tx, ty)).or_default().push(pos);
                    }
                }
            }
        }
    }

    let mut tiles = Vec::new();
    for ((ix, iy), members) in buckets {
        let origin = (gx0 + ix as f64 * size, gy0 + iy as f64 * size);
        let mut zmap: std::collections::BTreeMap<i32, i32> = std::collections::BTreeMap::new();
        let mut prims = Vec::with_capacity(members.len());
        for (new_id, &pos) in members.iter().enumerate() {
            let src = &d.primitives[pos];
            let instance = if src.instance >= 0 {
                let next = zmap.len() as i32;
                *zmap.entry(src.instance).or_insert(next)
            } else {
                src.instance
            };
            prims.push(Primitive {
                id: new_id,
                geometry: src.geometry.clone(),
                label: src.label,
                instance,
            });
        }
        let mut tile = Drawing::new(prims, d.classes.clone());
        tile.meta.source = d.meta.source.clone();
        tile.meta.origin = origin;
        tile.meta.tile_size = size;
        tiles.push(tile);
    }
    Ok(tiles)
}

/// Map a tile's coordinates into [0,1]^2: subtract the origin, divide by the
/// tile size. Lengths scale by 1/tile_size. Invertible via [`denormalize_coords`].
pub fn normalize_coords(tile: &Drawing) -> Result<Drawing> {
    if tile.meta.tile_size <= 0.0 {
        return Err(Error::Config("tile has no origin metadata".into()));
    }
    let (ox, oy) = tile.meta.origin;
    let s = 1.0 / tile.meta.tile_size;
    let mut out = tile.clone();
    for p in &mut out.primitives {
        p.geometry = p.geometry.translate(-ox, -oy).scale(s);
    }
    out
        .meta
        .source
        .get_or_insert_with(|| "normalized".to_string());
    Ok(out)
}

/// Inverse of [`normalize_coords`] given the preserved metadata.
pub fn denormalize_coords(tile: &Drawing) -> Result<Drawing> {
    if tile.meta.tile_size <= 0.0 {
        return Err(Error::Config("tile has no origin metadata".into()));
    }
    let (ox, oy) = tile.meta.origin;
    let s = tile.meta.tile_size;
    let mut out = tile.clone();
    for p in &mut out.primitives {
        p.geometry = p.geometry.scale(s).translate(ox, oy);
    }
    Ok(out)
}
