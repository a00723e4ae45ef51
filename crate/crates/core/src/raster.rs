//! Tile rasterization, the pluggable visual feature extractor, and bilinear
//! sampling of initial node embeddings at primitive centers.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Initializer, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Drawing, Geometry};

/// Grayscale raster, row-major, y-down, ink = 1, background = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.size + x]
    }

    /// Binary PGM debug dump.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

/// Normalized tile coordinates -> pixel coordinates (cell-center lattice,
/// y-down). Shared by rasterization and feature sampling.
pub fn to_pixel(size: usize, x: f64, y: f64) -> (f64, f64) {
    let s = size as f64;
    (x * s - 0.5, (1.0 - y) * s - 0.5)
}

fn splat(img: &mut Image, px: f64, py: f64, amount: f64) {
    let n = img.size as isize;
    let x0 = px.floor() as isize;
    let y0 = py.floor() as isize;
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    for (dx, dy, w) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let (x, y) = (x0 + dx, y0 + dy);
        if x >= 0 && x < n && y >= 0 && y < n {
            img.data[(y * n + x) as usize] += amount * w;
        }
    }
}

/// Stamp a polyline-approximated curve by splatting evenly spaced samples,
/// about two per pixel of arc length.
fn stroke(img: &mut Image, points: impl Fn(f64) -> (f64, f64), length_norm: f64) {
    let len_px = (length_norm * img.size as f64).max(1e-6);
    let samples = (len_px * 2.0).ceil().max(1.0) as usize;
    let ink_per_sample = len_px / samples as f64 * 0.5;
    for i in 0..=samples {
        let t = i as f64 / samples as f64;
        let (x, y) = points(t);
        // clamp for rasterization only; graph keeps true coords
        let (px, py) = to_pixel(img.size, x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
        splat(img, px, py, ink_per_sample);
    }
}

/// Anti-aliased rendering of every primitive in a normalized tile. Text
/// boxes render as outlines. Output is deterministic for fixed input.
pub fn rasterize_tile(tile: &Drawing, size: usize) -> Image {
    let mut img = Image {
        size,
        data: vec![0.0; size * size],
    };
    for p in &tile.primitives {
        match &p.geometry {
            &Geometry::Line { x1, y1, x2, y2 } => {
                let len = (x2 - x1).hypot(y2 - y1);
                stroke(
                    &mut img,
                    |t| (x1 + (x2 - x1) * t, y1 + (y2 - y1) * t),
                    len,
                );
            }
            &Geometry::Arc {
                cx,
                cy,
                r,
                start,
                sweep,
            } => {
                stroke(
                    &mut img,
                    |t| {
                        let a = start + sweep * t;
                        (cx + r * a.cos(), cy + r * a.sin())
                    },
                    r * sweep.abs(),
                );
            }
            &Geometry::Circle { cx, cy, r } => {
                stroke(
                    &mut img,
                    |t| {
                        let a = t * std::f64::consts::TAU;
                        (cx + r * a.cos(), cy + r * a.sin())
                    },
                    std::f64::consts::TAU * r,
                );
            }
            &Geometry::Ellipse { cx, cy, a, b, rot } => {
                let (sr, cr) = rot.sin_cos();
                let len = p.geometry.length();
                stroke(
                    &mut img,
                    |t| {
                        let ang = t * std::f64::consts::TAU;
                        let (ex, ey) = (a * ang.cos(), b * ang.sin());
                        (cx + ex * cr - ey * sr, cy + ex * sr + ey * cr)
                    },
                    len,
                );
            }
            &Geometry::Text {
                xmin,
                ymin,
                xmax,
                ymax,
                ..
            } => {
                for (ax, ay, bx, by) in [
                    (xmin, ymin, xmax, ymin),
                    (xmax, ymin, xmax, ymax),
                    (xmax, ymax, xmin, ymax),
                    (xmin, ymax, xmin, ymin),
                ] {
                    let len = (bx - ax).hypot(by - ay);
                    stroke(&mut img, |t| (ax + (bx - ax) * t, ay + (by - ay) * t), len);
                }
            }
        }
    }
    for v in &mut img.data {
        *v = v.min(1.0);
    }
    img
}

/// Dense visual feature map with the normalized-coords -> pixel affine.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    /// row-major [h][w][channels], y-down
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.w as f64 - 0.5, (1.0 - y) * self.h as f64 - 0.5)
    }

    /// Non-differentiable bilinear sample, matching the tape op semantics.
    pub fn sample(&self, x: f64, y: f64) -> Vec<f64> {
        let (px, py) = self.pixel_coords(x, y);
        let px = px.clamp(0.0, (self.w - 1) as f64);
        let py = py.clamp(0.0, (self.h - 1) as f64);
        let x0 = (px.floor() as usize).min(self.w - 2);
        let y0 = (py.floor() as usize).min(self.h - 2);
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        let mut out = vec![0.0; self.channels];
        for c in 0..self.channels {
            let g = |yy: usize, xx: usize| self.data[(yy * self.w + xx) * self.channels + c];
            out[c] = g(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + g(y0, x0 + 1) * fx * (1.0 - fy)
                + g(y0 + 1, x0) * (1.0 - fx) * fy
                + g(y0 + 1, x0 + 1) * fx * fy;
        }
        out
    }

    /// Binary file: header (H, W, d_f little-endian u32) + f32 payload.
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.h as u32).to_le_bytes())?;
        w.write_all(&(self.w as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<FeatureMap> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let h = u32::from_le_bytes(b) as usize;
        r.read_exact(&mut b)?;
        let w = u32::from_le_bytes(b) as usize;
        r.read_exact(&mut b)?;
        let channels = u32::from_le_bytes(b) as usize;
        let mut data = Vec::with_capacity(h * w * channels);
        for _ in 0..h * w * channels {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        Ok(FeatureMap { h, w, channels, data })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExtractorBackend {
    ConvStack,
    FileImport(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub backend: ExtractorBackend,
    /// Raster width = height; power of two.
    pub raster_size: usize,
    /// Output feature channels d_f.
    pub channels: usize,
    /// Channel widths of the two intermediate conv stages.
    pub stage_channels: [usize; 2],
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            backend: ExtractorBackend::ConvStack,
            raster_size: 256,
            channels: 32,
            stage_channels: [8, 16],
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("feature channels must be >= 1".into()));
        }
        if !self.raster_size.is_power_of_two() || self.raster_size < 16 {
            return Err(Error::Config("raster size must be a power of two >= 16".into()));
        }
        Ok(())
    }

    /// Feature map side length: three stride-2 stages.
    pub fn map_size(&self) -> usize {
        self.raster_size / 8
    }

    pub fn init_params(&self, init: &mut Initializer, store: &mut ParamStore) {
        let widths = [1, self.stage_channels[0], self.stage_channels[1], self.channels];
        for s in 0..3 {
            init.conv3x3(store, &format!("cnn.stage{s}.w"), widths[s], widths[s + 1]);
            init.zeros(store, &format!("cnn.stage{s}.b"), &[widths[s + 1]]);
        }
    }

    /// Differentiable conv-stack forward: image [s, s, 1] -> [s/8, s/8, d_f],
    /// ReLU after each stage.
    pub fn apply_conv_stack(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
    ) -> Result<Var> {
        let mut x = image;
        for s in 0..3 {
            let w = tape.param(store, &format!("cnn.stage{s}.w"));
            let b = tape.param(store, &format!("cnn.stage{s}.b"));
            x = tape.conv3x3_stride2(x, w, b)?;
            x = tape.relu(x);
        }
        Ok(x)
    }
}

/// Feature extraction entry point for the non-training path: returns plain
/// values. For file-import the map must match the configured shape.
pub fn extract_features(
    img: &Image,
    cfg: &ExtractorConfig,
    store: &ParamStore,
) -> Result<FeatureMap> {
    cfg.validate()?;
    if img.size != cfg.raster_size {
        return Err(Error::shape(
            "extract_features",
            &[img.size, img.size],
            &[cfg.raster_size, cfg.raster_size],
        ));
    }
    match &cfg.backend {
        ExtractorBackend::ConvStack => {
            let mut tape = Tape::new();
            let x = tape.constant(&[img.size, img.size, 1], img.data.clone());
            let out = cfg.apply_conv_stack(&mut tape, store, x)?;
            let s = tape.shape(out).to_vec();
            Ok(FeatureMap {
                h: s[0],
                w: s[1],
                channels: s[2],
                data: tape.value(out).to_vec(),
            })
        }
        ExtractorBackend::FileImport(path) => {
            let map = FeatureMap::load(&mut std::io::BufReader::new(std::fs::File::open(
                Path::new(path),
            )?))?;
            let m = cfg.map_size();
            if map.h != m || map.w != m || map.channels != cfg.channels {
                return Err(Error::shape(
                    "file-import feature map",
                    &[map.h, map.w, map.channels],
                    &[m, m, cfg.channels],
                ));
            }
            Ok(map)
        }
    }
}

/// Initial vertex embeddings: row i is the feature map sampled at primitive
/// i's center. Applies to all five kinds including text.
pub fn init_vertex_features(tile: &Drawing, map: &FeatureMap) -> Vec<Vec<f64>> {
    tile.primitives
        .iter()
        .map(|p| {
            let (x, y) = p.center();
            map.sample(x, y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassInfo, ClassKind, Primitive};

    fn classes() -> Vec<ClassInfo> {
        vec![ClassInfo {
            id: 1,
            name: "door".into(),
            kind: ClassKind::Thing,
        }]
    }

    #[test]
    fn empty_tile_all_zero() {
        let tile = Drawing::new(vec![], classes());
        let img = rasterize_tile(&tile, 64);
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn horizontal_line_leaves_ink_at_mid_row() {
        let tile = Drawing::new(
            vec![Primitive {
                id: 0,
                geometry: Geometry::Line {
                    x1: 0.0,
                    y1: 0.5,
                    x2: 1.0,
                    y2: 0.5,
                },
                label: 1,
                instance: 0,
            }],
            classes(),
        );
        let img = rasterize_tile(&tile, 64);
        let mid = 64 / 2;
        let rows: [f64; 2] = [
            (0..64).map(|x| img.get(x, mid - 1)).sum(),
            (0..64).map(|x| img.get(x, mid)).sum(),
        ];
        assert!(rows[0] + rows[1] > 1.0, "expected ink near mid row, got {rows:?}");
    }

    #[test]
    fn rasterize_deterministic() {
        let tile = Drawing::new(
            vec![Primitive {
                id: 0,
                geometry: Geometry::Circle {
                    cx: 0.5,
                    cy: 0.5,
                    r: 0.25,
                },
                label: 1,
                instance: 0,
            }],
            classes(),
        );
        assert_eq!(rasterize_tile(&tile, 128), rasterize_tile(&tile, 128));
    }

    #[test]
    fn conv_stack_shape_contract() {
        let cfg = ExtractorConfig::default();
        let mut store = ParamStore::new();
        cfg.init_params(&mut Initializer::new(0), &mut store);
        let img = Image {
            size: 256,
            data: vec![0.0; 256 * 256],
        };
        let map = extract_features(&img, &cfg, &store).unwrap();
        assert_eq!((map.h, map.w, map.channels), (32, 32, 32));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_map() {
        let cfg = ExtractorConfig {
            raster_size: 32,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        cfg.init_params(&mut Initializer::new(0), &mut store);
        let img = Image {
            size: 32,
            data: vec![0.0; 32 * 32],
        };
        let map = extract_features(&img, &cfg, &store).unwrap();
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_map_file_roundtrip() {
        let map = FeatureMap {
            h: 3,
            w: 4,
            channels: 2,
            data: (0..24).map(|i| i as f64 * 0.5).collect(),
        };
        let mut buf = Vec::new();
        map.save(&mut buf).unwrap();
        let back = FeatureMap::load(&mut buf.as_slice()).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn sample_at_cell_center_is_identity() {
        let map = FeatureMap {
            h: 4,
            w: 4,
            channels: 1,
            data: (0..16).map(|i| i as f64).collect(),
        };
        // cell (x=1, y=2) center in normalized coords
        let x = (1.0 + 0.5) / 4.0;
        let y = 1.0 - (2.0 + 0.5) / 4.0;
        let v = map.sample(x, y);
        assert!((v[0] - (2.0 * 4.0 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn sample_linear_in_map() {
        let f1 = FeatureMap {
            h: 3,
            w: 3,
            channels: 1,
            data: (0..9).map(|i| i as f64).collect(),
        };
        let f2 = FeatureMap {
            h: 3,
            w: 3,
            channels: 1,
            data: (0..9).map(|i| (i as f64).sin()).collect(),
        };
        let combined = FeatureMap {
            h: 3,
            w: 3,
            channels: 1,
            data: f1
                .data
                .iter()
                .zip(&f2.data)
                .map(|(a, b)| 2.0 * a + 0.5 * b)
                .collect(),
        };
        let pt = (0.37, 0.61);
        let lhs = combined.sample(pt.0, pt.1)[0];
        let rhs = 2.0 * f1.sample(pt.0, pt.1)[0] + 0.5 * f2.sample(pt.0, pt.1)[0];
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn sample_continuous_in_position() {
        let map = FeatureMap {
            h: 8,
            w: 8,
            channels: 1,
            data: (0..64).map(|i| ((i * 13) % 7) as f64).collect(),
        };
        let (x, y) = (0.433, 0.557);
        let base = map.sample(x, y)[0];
        let moved = map.sample(x + 1e-6, y - 1e-6)[0];
        // Lipschitz bound: max cell delta (6) times pixel scale (8) per axis
        assert!((base - moved).abs() <= 6.0 * 8.0 * 2e-6);
    }

    #[test]
    fn constant_map_constant_vertex_features() {
        let map = FeatureMap {
            h: 4,
            w: 4,
            channels: 3,
            data: vec![2.5; 48],
        };
        let tile = Drawing::new(
            vec![
                Primitive {
                    id: 0,
                    geometry: Geometry::Line {
                        x1: 0.1,
                        y1: 0.1,
                        x2: 0.3,
                        y2: 0.3,
                    },
                    label: 1,
                    instance: 0,
                },
                Primitive {
                    id: 1,
                    geometry: Geometry::Circle {
                        cx: 0.7,
                        cy: 0.7,
                        r: 0.1,
                    },
                    label: 1,
                    instance: 1,
                },
            ],
            classes(),
        );
        let rows = init_vertex_features(&tile, &map);
        assert_eq!(rows.len(), 2);
        for row in rows {
            assert_eq!(row, vec![2.5; 3]);
        }
    }

    #[test]
    fn empty_tile_empty_features() {
        let map = FeatureMap {
            h: 2,
            w: 2,
            channels: 2,
            data: vec![0.0; 8],
        };
        let tile = Drawing::new(vec![], classes());
        assert!(init_vertex_features(&tile, &map).is_empty());
    }

    #[test]
    fn pgm_header() {
        let img = Image {
            size: 2,
            data: vec![0.0, 1.0, 0.5, 0.25],
        };
        let pgm = img.to_pgm();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(pgm.len(), 11 + 4);
    }
}
