//! The type-aware transformer: neighbor attention scores biased by an MLP
//! embedding of the edge features, classification and offset heads, and the
//! joint semantic/instance loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{mlp_apply, mlp_init, Initializer, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{build_edge_tensor, knn_neighbors, EDGE_CHANNELS};
use crate::model::{ClassKind, Drawing};
use crate::raster::{rasterize_tile, ExtractorConfig, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stages: usize,
    pub heads: usize,
    pub dim: usize,
    /// Hidden width of the per-stage edge-bias MLP.
    pub edge_hidden: usize,
    /// Hidden width of the feed-forward sublayer.
    pub ffn_hidden: usize,
    /// Hidden width of the offset head MLP.
    pub offset_hidden: usize,
    /// Neighbors per node.
    pub k: usize,
    /// Total classes including background and the annotation pseudo-class.
    pub num_classes: usize,
    pub am_scale: f64,
    pub am_margin: f64,
    pub lambda_sem: f64,
    pub lambda_ins: f64,
    /// Bare update rule: no value/output projections, residuals, layer norm,
    /// or feed-forward sublayer.
    pub literal_eq4: bool,
    /// Ablation: force the edge-bias embedding to zero.
    pub zero_edge_bias: bool,
    /// Include annotation-class rows in the semantic loss.
    pub annotation_in_sem_loss: bool,
    pub extractor: ExtractorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 4,
            heads: 6,
            dim: 96,
            edge_hidden: 32,
            ffn_hidden: 192,
            offset_hidden: 64,
            k: 16,
            num_classes: 0,
            am_scale: 30.0,
            am_margin: 0.35,
            lambda_sem: 1.0,
            lambda_ins: 0.3,
            literal_eq4: false,
            zero_edge_bias: false,
            annotation_in_sem_loss: true,
            extractor: ExtractorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stages must be >= 1".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must cover background + 1".into()));
        }
        if self.lambda_sem < 0.0 || self.lambda_ins < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        self.extractor.validate()
    }

    /// Serialize as key=value lines (a flat TOML subset).
    pub fn to_kv(&self) -> String {
        let backend = match &self.extractor.backend {
            crate::raster::ExtractorBackend::ConvStack => "conv-stack".to_string(),
            crate::raster::ExtractorBackend::FileImport(p) => format!("file-import:{p}"),
        };
        format!(
            "stages = {}\nheads = {}\ndim = {}\nedge_hidden = {}\nffn_hidden = {}\n\
             offset_hidden = {}\nk = {}\nnum_classes = {}\nam_scale = {}\nam_margin = {}\n\
             lambda_sem = {}\nlambda_ins = {}\nliteral_eq4 = {}\nzero_edge_bias = {}\n\
             annotation_in_sem_loss = {}\nraster_size = {}\nfeature_channels = {}\n\
             extractor_backend = {}\n",
            self.stages,
            self.heads,
            self.dim,
            self.edge_hidden,
            self.ffn_hidden,
            self.offset_hidden,
            self.k,
            self.num_classes,
            self.am_scale,
            self.am_margin,
            self.lambda_sem,
            self.lambda_ins,
            self.literal_eq4,
            self.zero_edge_bias,
            self.annotation_in_sem_loss,
            self.extractor.raster_size,
            self.extractor.channels,
            backend,
        )
    }

    /// Parse key=value lines produced by [`Self::to_kv`]; unknown keys are
    /// rejected.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: missing '='", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |k: &str| Error::Config(format!("config line {}: bad value for {k}", lineno + 1));
            macro_rules! set {
                ($field:expr, $ty:ty) => {
                    $field = value.parse::<$ty>().map_err(|_| bad(key))?
                };
            }
            match key {
                "stages" => set!(self.stages, usize),
                "heads" => set!(self.heads, usize),
                "dim" => set!(self.dim, usize),
                "edge_hidden" => set!(self.edge_hidden, usize),
                "ffn_hidden" => set!(self.ffn_hidden, usize),
                "offset_hidden" => set!(self.offset_hidden, usize),
                "k" => set!(self.k, usize),
                "num_classes" => set!(self.num_classes, usize),
                "am_scale" => set!(self.am_scale, f64),
                "am_margin" => set!(self.am_margin, f64),
                "lambda_sem" => set!(self.lambda_sem, f64),
                "lambda_ins" => set!(self.lambda_ins, f64),
                "literal_eq4" => set!(self.literal_eq4, bool),
                "zero_edge_bias" => set!(self.zero_edge_bias, bool),
                "annotation_in_sem_loss" => set!(self.annotation_in_sem_loss, bool),
                "raster_size" => set!(self.extractor.raster_size, usize),
                "feature_channels" => set!(self.extractor.channels, usize),
                "extractor_backend" => {
                    self.extractor.backend = match value {
                        "conv-stack" => crate::raster::ExtractorBackend::ConvStack,
                        v if v.starts_with("file-import:") => {
                            crate::raster::ExtractorBackend::FileImport(
                                v["file-import:".len()..].to_string(),
                            )
                        }
                        _ => return Err(bad(key)),
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "config line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Everything the forward pass needs for one tile, precomputed once.
#[derive(Debug, Clone)]
pub struct TileInputs {
    pub n: usize,
    pub image: Image,
    /// Flattened neighbor ids, N*k; padded slots point at the node itself.
    pub nbr_flat: Vec<usize>,
    /// N*k; true for real neighbor slots.
    pub mask: Vec<bool>,
    /// Edge tensor payload, N*k*8.
    pub edge: Vec<f64>,
    /// Primitive centers in normalized coordinates.
    pub centers: Vec<(f64, f64)>,
    /// Ground-truth class per primitive.
    pub labels: Vec<usize>,
    /// Ground-truth offsets to the instance center, N*2; zero for stuff.
    pub offset_targets: Vec<f64>,
    /// 1.0 for thing primitives belonging to an instance, else 0.0.
    pub thing_mask: Vec<f64>,
}

/// Build [`TileInputs`] from a normalized tile. Instance centers are the
/// arithmetic mean of member primitive centers.
pub fn prepare_tile(tile: &Drawing, cfg: &ModelConfig) -> Result<TileInputs> {
    let n = tile.len();
    let nbrs = knn_neighbors(tile, cfg.k)?;
    let edge_tensor = build_edge_tensor(tile, &nbrs)?;
    let mut nbr_flat = vec![0usize; n * cfg.k];
    for (i, row) in nbrs.neighbors.iter().enumerate() {
        for j in 0..cfg.k {
            nbr_flat[i * cfg.k + j] = row.get(j).copied().unwrap_or(i);
        }
    }
    let centers: Vec<(f64, f64)> = tile.primitives.iter().map(|p| p.center()).collect();

    // instance centers: mean of member centers
    let mut sums: std::collections::BTreeMap<i32, (f64, f64, usize)> = Default::default();
    for (i, p) in tile.primitives.iter().enumerate() {
        if p.instance >= 0 {
            let e = sums.entry(p.instance).or_insert((0.0, 0.0, 0));
            e.0 += centers[i].0;
            e.1 += centers[i].1;
            e.2 += 1;
        }
    }
    let mut offset_targets = vec![0.0; n * 2];
    let mut thing_mask = vec![0.0; n];
    for (i, p) in tile.primitives.iter().enumerate() {
        if p.instance >= 0 {
            let (sx, sy, c) = sums[&p.instance];
            offset_targets[i * 2] = sx / c as f64 - centers[i].0;
            offset_targets[i * 2 + 1] = sy / c as f64 - centers[i].1;
            thing_mask[i] = 1.0;
        }
    }

    Ok(TileInputs {
        n,
        image: rasterize_tile(tile, cfg.extractor.raster_size),
        nbr_flat,
        mask: edge_tensor.mask,
        edge: edge_tensor.data,
        centers,
        labels: tile.primitives.iter().map(|p| p.label as usize).collect(),
        offset_targets,
        thing_mask,
    })
}

/// Raw multi-head attention scores A_s: per head, scaled dot products of
/// query and key projections over the neighbor slots. Output [n, k, h].
pub fn attention_scores(
    tape: &mut Tape,
    q: Var,
    key: Var,
    nbr_flat: &[usize],
    n: usize,
    k: usize,
    heads: usize,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let rep_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let q_rep = tape.gather_rows(q, &rep_idx)?;
    let k_gat = tape.gather_rows(key, nbr_flat)?;
    let prod = tape.mul(q_rep, k_gat)?;
    let scores = tape.sum_chunks_lastdim(prod, heads)?;
    let scaled = tape.scalar_mul(scores, 1.0 / ((d / heads) as f64).sqrt());
    tape.reshape(scaled, &[n, k, heads])
}

/// Structural embedding T_s = MLP(E), one independent MLP per stage.
pub fn edge_bias(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    edge: Var,
) -> Result<Var> {
    mlp_apply(tape, store, prefix, edge)
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

pub struct ForwardOut {
    /// Cosine logits, [n, num_classes].
    pub cos_logits: Var,
    /// Predicted offsets, [n, 2].
    pub offsets: Var,
}

pub struct Losses {
    pub sem: Var,
    pub ins: Var,
    pub total: Var,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        cfg.extractor.init_params(&mut init, &mut store);
        init.linear(&mut store, "input_proj.w", cfg.extractor.channels, cfg.dim);
        init.zeros(&mut store, "input_proj.b", &[cfg.dim]);
        for s in 0..cfg.stages {
            init.linear(&mut store, &format!("stage{s}.wq"), cfg.dim, cfg.dim);
            init.linear(&mut store, &format!("stage{s}.wk"), cfg.dim, cfg.dim);
            mlp_init(
                &mut init,
                &mut store,
                &format!("stage{s}.edge"),
                EDGE_CHANNELS,
                cfg.edge_hidden,
                cfg.heads,
            );
            if !cfg.literal_eq4 {
                init.linear(&mut store, &format!("stage{s}.wv"), cfg.dim, cfg.dim);
                init.linear(&mut store, &format!("stage{s}.wo"), cfg.dim, cfg.dim);
                init.ones(&mut store, &format!("stage{s}.ln1.gain"), &[cfg.dim]);
                init.zeros(&mut store, &format!("stage{s}.ln1.bias"), &[cfg.dim]);
                init.ones(&mut store, &format!("stage{s}.ln2.gain"), &[cfg.dim]);
                init.zeros(&mut store, &format!("stage{s}.ln2.bias"), &[cfg.dim]);
                mlp_init(
                    &mut init,
                    &mut store,
                    &format!("stage{s}.ffn"),
                    cfg.dim,
                    cfg.ffn_hidden,
                    cfg.dim,
                );
            }
        }
        init.linear(&mut store, "cls.weight", cfg.num_classes, cfg.dim);
        mlp_init(
            &mut init,
            &mut store,
            "offset",
            cfg.dim,
            cfg.offset_hidden,
            2,
        );
        Ok(Model { cfg, store })
    }

    /// Full differentiable forward pass: raster features, input projection,
    /// staged type-aware attention, both heads.
    pub fn forward(&self, tape: &mut Tape, inputs: &TileInputs) -> Result<ForwardOut> {
        let cfg = &self.cfg;
        let n = inputs.n;
        let size = cfg.extractor.raster_size;
        let img = tape.constant(&[size, size, 1], inputs.image.data.clone());
        let fmap = cfg.extractor.apply_conv_stack(tape, &self.store, img)?;
        let map_size = cfg.extractor.map_size() as f64;
        let points: Vec<(f64, f64)> = inputs
            .centers
            .iter()
            .map(|&(x, y)| (x * map_size - 0.5, (1.0 - y) * map_size - 0.5))
            .collect();
        let sampled = tape.bilinear_sample(fmap, &points)?; // [n, d_f]
        let wp = tape.param(&self.store, "input_proj.w");
        let bp = tape.param(&self.store, "input_proj.b");
        let mut feat = tape.matmul(sampled, wp)?;
        feat = tape.add(feat, bp)?;

        let edge_const = tape.constant(&[n, cfg.k, EDGE_CHANNELS], inputs.edge.clone());

        for s in 0..cfg.stages {
            feat = self.stage_forward(tape, s, feat, edge_const, inputs)?;
        }

        // classification head: normalized features against normalized class
        // weights -> cosine logits
        let fn_ = tape.row_normalize(feat)?;
        let wcls = tape.param(&self.store, "cls.weight");
        let wn = tape.row_normalize(wcls)?;
        let wt = tape.transpose(wn)?;
        let cos_logits = tape.matmul(fn_, wt)?;

        let offsets = mlp_apply(tape, &self.store, "offset", feat)?;
        Ok(ForwardOut { cos_logits, offsets })
    }

    fn stage_forward(
        &self,
        tape: &mut Tape,
        s: usize,
        feat: Var,
        edge_const: Var,
        inputs: &TileInputs,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let (n, k, h, d) = (inputs.n, cfg.k, cfg.heads, cfg.dim);

        let attended = |tape: &mut Tape, x: Var, values: Var| -> Result<Var> {
            let wq = tape.param(&self.store, &format!("stage{s}.wq"));
            let wk = tape.param(&self.store, &format!("stage{s}.wk"));
            let q = tape.matmul(x, wq)?;
            let key = tape.matmul(x, wk)?;
            let a = attention_scores(tape, q, key, &inputs.nbr_flat, n, k, h)?;
            let biased = if cfg.zero_edge_bias {
                a
            } else {
                let t = edge_bias(tape, &self.store, &format!("stage{s}.edge"), edge_const)?;
                tape.add(a, t)?
            };
            let weights = tape.softmax_neighbors(biased, &inputs.mask)?;
            let v_gat = tape.gather_rows(values, &inputs.nbr_flat)?;
            let w_flat = tape.reshape(weights, &[n * k, h])?;
            let w_exp = tape.repeat_chunks_lastdim(w_flat, d / h)?;
            let weighted = tape.mul(v_gat, w_exp)?;
            tape.sum_group_rows(weighted, k)
        };

        if cfg.literal_eq4 {
            // f_s = softmax(A_s + T_s) f_{s-1}, nothing else
            return attended(tape, feat, feat);
        }

        let g1 = tape.param(&self.store, &format!("stage{s}.ln1.gain"));
        let b1 = tape.param(&self.store, &format!("stage{s}.ln1.bias"));
        let xn = tape.layer_norm(feat, g1, b1, 1e-5)?;
        let wv = tape.param(&self.store, &format!("stage{s}.wv"));
        let v = tape.matmul(xn, wv)?;
        let agg = attended(tape, xn, v)?;
        let wo = tape.param(&self.store, &format!("stage{s}.wo"));
        let proj = tape.matmul(agg, wo)?;
        let x = tape.add(feat, proj)?;

        let g2 = tape.param(&self.store, &format!("stage{s}.ln2.gain"));
        let b2 = tape.param(&self.store, &format!("stage{s}.ln2.bias"));
        let xn2 = tape.layer_norm(x, g2, b2, 1e-5)?;
        let ffn = mlp_apply(tape, &self.store, &format!("stage{s}.ffn"), xn2)?;
        tape.add(x, ffn)
    }

    /// Joint loss: AM-softmax semantic cross-entropy plus the masked
    /// instance-offset loss, combined with the configured weights.
    pub fn loss(&self, tape: &mut Tape, inputs: &TileInputs, out: &ForwardOut) -> Result<Losses> {
        let cfg = &self.cfg;
        let n = inputs.n;
        let c = cfg.num_classes;

        // AM-softmax: s * (cos - m at the target class)
        let mut margin = vec![0.0; n * c];
        for (i, &t) in inputs.labels.iter().enumerate() {
            margin[i * c + t] = -cfg.am_scale * cfg.am_margin;
        }
        let margin_const = tape.constant(&[n, c], margin);
        let scaled = tape.scalar_mul(out.cos_logits, cfg.am_scale);
        let adjusted = tape.add(scaled, margin_const)?;
        let annotation_class = c - 1;
        let row_mask: Option<Vec<bool>> = if cfg.annotation_in_sem_loss {
            None
        } else {
            Some(
                inputs
                    .labels
                    .iter()
                    .map(|&l| l != annotation_class)
                    .collect(),
            )
        };
        let sem = tape.cross_entropy_logits(adjusted, &inputs.labels, row_mask.as_deref())?;

        // masked mean Euclidean offset residual
        let mask_sum: f64 = inputs.thing_mask.iter().sum();
        let ins = if mask_sum > 0.0 {
            let target = tape.constant(&[n, 2], inputs.offset_targets.clone());
            let residual = tape.sub(out.offsets, target)?;
            let norms = tape.row_norms(residual)?;
            let mask: Vec<f64> = inputs.thing_mask.clone();
            let mask_const = tape.constant(&[n, 1], mask);
            let masked = tape.mul(norms, mask_const)?;
            let total = tape.sum_all(masked);
            tape.scalar_mul(total, 1.0 / mask_sum)
        } else {
            tape.scalar_const(0.0)
        };

        let total = total_loss(tape, sem, ins, cfg)?;
        Ok(Losses { sem, ins, total })
    }

    /// Inference: predicted labels (cosine argmax, ties to the smaller class
    /// id) and offsets.
    pub fn predict(&self, inputs: &TileInputs) -> Result<(Vec<u32>, Vec<(f64, f64)>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, inputs)?;
        let logits = tape.value(out.cos_logits);
        let c = self.cfg.num_classes;
        let labels = (0..inputs.n)
            .map(|i| {
                let row = &logits[i * c..(i + 1) * c];
                let mut best = 0usize;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best as u32
            })
            .collect();
        let ov = tape.value(out.offsets);
        let offsets = (0..inputs.n).map(|i| (ov[i * 2], ov[i * 2 + 1])).collect();
        Ok((labels, offsets))
    }
}

/// lambda_sem * L_sem + lambda_ins * L_ins.
pub fn total_loss(tape: &mut Tape, sem: Var, ins: Var, cfg: &ModelConfig) -> Result<Var> {
    let sv = tape.scalar(sem);
    let iv = tape.scalar(ins);
    if !sv.is_finite() || !iv.is_finite() {
        return Err(Error::Numeric(format!("non-finite losses: sem={sv} ins={iv}")));
    }
    let a = tape.scalar_mul(sem, cfg.lambda_sem);
    let b = tape.scalar_mul(ins, cfg.lambda_ins);
    tape.add(a, b)
}

/// Total number of model classes for a drawing's class table.
pub fn num_classes_for(d: &Drawing) -> usize {
    d.num_model_classes()
}

/// True when the label is a thing class of the drawing.
pub fn is_thing(d: &Drawing, label: u32) -> bool {
    matches!(d.class_kind(label), Some(ClassKind::Thing))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            stages: 2,
            heads: 2,
            dim: 8,
            edge_hidden: 8,
            ffn_hidden: 16,
            offset_hidden: 8,
            k: 3,
            num_classes: 5,
            extractor: ExtractorConfig {
                raster_size: 32,
                channels: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn attention_scores_zero_query() {
        let mut t = Tape::new();
        let q = t.constant(&[2, 4], vec![0.0; 8]);
        let k = t.constant(&[2, 4], vec![1.0; 8]);
        let a = attention_scores(&mut t, q, k, &[1, 1, 0, 0], 2, 2, 2).unwrap();
        assert!(t.value(a).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_scores_hand_computed() {
        // d=4, h=2, head dim 2: head 0 of node 0 vs neighbor 1:
        // q=(1,0), k=(1,1) -> dot 1, / sqrt(2)
        let mut t = Tape::new();
        let q = t.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let k = t.constant(&[2, 4], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let a = attention_scores(&mut t, q, k, &[1, 0], 2, 1, 2).unwrap();
        let v = t.value(a);
        assert!((v[0] - 1.0 / 2.0f64.sqrt()).abs() < 1e-9, "got {v:?}");
        assert!((v[0] - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn attention_scores_shape() {
        let mut t = Tape::new();
        let q = t.constant(&[5, 6], vec![0.1; 30]);
        let k = t.constant(&[5, 6], vec![0.1; 30]);
        let nbr: Vec<usize> = (0..15).map(|i| i % 5).collect();
        let a = attention_scores(&mut t, q, k, &nbr, 5, 3, 2).unwrap();
        assert_eq!(t.shape(a), &[5, 3, 2]);
    }

    #[test]
    fn edge_bias_zero_weights_constant_output() {
        let mut store = ParamStore::new();
        store.insert("e.w1", &[8, 4], vec![0.0; 32]);
        store.insert("e.b1", &[4], vec![0.0; 4]);
        store.insert("e.w2", &[4, 2], vec![0.0; 8]);
        store.insert("e.b2", &[2], vec![3.0, -1.0]);
        let mut t = Tape::new();
        let e = t.constant(&[3, 2, 8], vec![0.5; 48]);
        let bias = edge_bias(&mut t, &store, "e", e).unwrap();
        assert_eq!(t.shape(bias), &[3, 2, 2]);
        for r in 0..6 {
            assert_eq!(&t.value(bias)[r * 2..r * 2 + 2], &[3.0, -1.0]);
        }
    }

    #[test]
    fn edge_bias_stage_params_independent() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(9);
        mlp_init(&mut init, &mut store, "s0", 8, 4, 2);
        mlp_init(&mut init, &mut store, "s1", 8, 4, 2);
        let mut t = Tape::new();
        let e = t.constant(&[1, 1, 8], vec![0.3; 8]);
        let b0 = edge_bias(&mut t, &store, "s0", e).unwrap();
        let b1 = edge_bias(&mut t, &store, "s1", e).unwrap();
        assert_ne!(t.value(b0), t.value(b1));
    }

    #[test]
    fn softmax_uniform_and_single_neighbor() {
        let mut t = Tape::new();
        // constant scores over 3 unmasked neighbors -> uniform thirds
        let x = t.constant(&[1, 3, 1], vec![2.0; 3]);
        let w = t.softmax_neighbors(x, &[true, true, true]).unwrap();
        for &v in t.value(w) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // single unmasked neighbor -> weight exactly 1
        let x = t.constant(&[1, 3, 1], vec![0.0, 7.0, -2.0]);
        let w = t.softmax_neighbors(x, &[false, true, false]).unwrap();
        assert_eq!(t.value(w), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn large_bias_dominates_softmax() {
        let mut t = Tape::new();
        let k = 4;
        let mut scores = vec![0.0; k];
        scores[2] = 10.0;
        let x = t.constant(&[1, k, 1], scores);
        let w = t.softmax_neighbors(x, &[true; 4]).unwrap();
        let expected = 10.0f64.exp() / (10.0f64.exp() + 3.0);
        assert!((t.value(w)[2] - expected).abs() < 1e-12);
        assert!(t.value(w)[2] > 0.999);
    }

    fn sample_tile() -> Drawing {
        use crate::model::{ClassInfo, Geometry, Primitive};
        let classes = vec![
            ClassInfo {
                id: 1,
                name: "door".into(),
                kind: ClassKind::Thing,
            },
            ClassInfo {
                id: 2,
                name: "wall".into(),
                kind: ClassKind::Stuff,
            },
        ];
        let mut prims = Vec::new();
        let positions = [
            (0.2, 0.2),
            (0.25, 0.22),
            (0.7, 0.7),
            (0.72, 0.68),
            (0.5, 0.9),
            (0.1, 0.8),
        ];
        for (i, &(x, y)) in positions.iter().enumerate() {
            prims.push(Primitive {
                id: i,
                geometry: Geometry::Line {
                    x1: x - 0.03,
                    y1: y,
                    x2: x + 0.03,
                    y2: y + 0.01,
                },
                label: if i < 4 { 1 } else { 2 },
                instance: if i < 2 {
                    0
                } else if i < 4 {
                    1
                } else {
                    -1
                },
            });
        }
        let mut d = Drawing::new(prims, classes);
        d.meta.tile_size = 14.0;
        d
    }

    #[test]
    fn forward_shapes() {
        let tile = sample_tile();
        let mut cfg = tiny_cfg();
        cfg.num_classes = num_classes_for(&tile);
        let model = Model::new(cfg.clone(), 3).unwrap();
        let inputs = prepare_tile(&tile, &cfg).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &inputs).unwrap();
        assert_eq!(tape.shape(out.cos_logits), &[6, cfg.num_classes]);
        assert_eq!(tape.shape(out.offsets), &[6, 2]);
    }

    #[test]
    fn zero_edge_bias_flag_equals_zeroed_mlp() {
        let tile = sample_tile();
        let mut cfg = tiny_cfg();
        cfg.num_classes = num_classes_for(&tile);
        let model = Model::new(cfg.clone(), 3).unwrap();

        let mut flag_cfg = cfg.clone();
        flag_cfg.zero_edge_bias = true;
        let flagged = Model {
            cfg: flag_cfg,
            store: model.store.clone(),
        };

        let mut zeroed = Model {
            cfg: cfg.clone(),
            store: model.store.clone(),
        };
        for s in 0..cfg.stages {
            for suffix in ["w1", "b1", "w2", "b2"] {
                let t = zeroed
                    .store
                    .get_mut(&format!("stage{s}.edge.{suffix}"))
                    .unwrap();
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }

        let inputs = prepare_tile(&tile, &cfg).unwrap();
        let mut t1 = Tape::new();
        let o1 = flagged.forward(&mut t1, &inputs).unwrap();
        let mut t2 = Tape::new();
        let o2 = zeroed.forward(&mut t2, &inputs).unwrap();
        assert_eq!(t1.value(o1.cos_logits), t2.value(o2.cos_logits));
        assert_eq!(t1.value(o1.offsets), t2.value(o2.offsets));
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let tile = sample_tile();
        let mut cfg = tiny_cfg();
        cfg.num_classes = num_classes_for(&tile);
        let model = Model::new(cfg.clone(), 5).unwrap();
        let inputs = prepare_tile(&tile, &cfg).unwrap();
        // reproduce one stage's weights by hand
        let mut tape = Tape::new();
        let feat = tape.constant(&[6, cfg.dim], vec![0.2; 6 * cfg.dim]);
        let wq = tape.param(&model.store, "stage0.wq");
        let wk = tape.param(&model.store, "stage0.wk");
        let q = tape.matmul(feat, wq).unwrap();
        let k = tape.matmul(feat, wk).unwrap();
        let a = attention_scores(&mut tape, q, k, &inputs.nbr_flat, 6, cfg.k, cfg.heads).unwrap();
        let w = tape.softmax_neighbors(a, &inputs.mask).unwrap();
        let wv = tape.value(w);
        for i in 0..6 {
            for l in 0..cfg.heads {
                let sum: f64 = (0..cfg.k).map(|j| wv[(i * cfg.k + j) * cfg.heads + l]).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn am_softmax_margin_hand_case() {
        // feature aligned with target weight, others orthogonal:
        // target logit s*(1-m) = 30*0.65 = 19.5, others 0
        let tile = sample_tile();
        let mut cfg = tiny_cfg();
        cfg.num_classes = num_classes_for(&tile);
        let n = 1;
        let c = cfg.num_classes;
        let mut tape = Tape::new();
        let mut cos = vec![0.0; c];
        cos[1] = 1.0;
        let cos_logits = tape.constant(&[n, c], cos);
        let mut margin = vec![0.0; n * c];
        margin[1] = -cfg.am_scale * cfg.am_margin;
        let margin_const = tape.constant(&[n, c], margin);
        let scaled = tape.scalar_mul(cos_logits, cfg.am_scale);
        let adjusted = tape.add(scaled, margin_const).unwrap();
        let v = tape.value(adjusted);
        assert!((v[1] - 19.5).abs() < 1e-12);
        assert!(v.iter().enumerate().all(|(j, &x)| j == 1 || x == 0.0));
    }

    #[test]
    fn margin_zero_scale_one_is_plain_cosine_ce() {
        let tile = sample_tile();
        let mut cfg = tiny_cfg();
        cfg.num_classes = num_classes_for(&tile);
        cfg.am_scale = 1.0;
        cfg.am_margin = 0.0;
        let model = Model::new(cfg.clone(), 11).unwrap();
        let inputs = prepare_tile(&tile, &cfg).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &inputs).unwrap();
        let losses = model.loss(&mut tape, &inputs, &out).unwrap();
        // plain cross-entropy on the raw cosine logits
        let expected = tape
            .cross_entropy_logits(out.cos_logits, &inputs.labels, None)
            .unwrap();
        assert!((tape.scalar(losses.sem) - tape.scalar(expected)).abs() < 1e-12);
    }

    #[test]
    fn offset_loss_hand_case() {
        // one thing primitive, o = 0, target residual (3,4) -> loss 5
        let cfg = tiny_cfg();
        let model = Model::new(
            ModelConfig {
                num_classes: 5,
                ..cfg
            },
            0,
        )
        .unwrap();
        let inputs = TileInputs {
            n: 2,
            image: Image {
                size: 32,
                data: vec![0.0; 32 * 32],
            },
            nbr_flat: vec![1, 0, 0, 0, 1, 1],
            mask: vec![true, false, false, true, false, false],
            edge: vec![0.0; 2 * 3 * 8],
            centers: vec![(0.1, 0.1), (0.9, 0.9)],
            labels: vec![1, 0],
            offset_targets: vec![3.0, 4.0, 0.0, 0.0],
            thing_mask: vec![1.0, 0.0],
        };
        let mut tape = Tape::new();
        let offsets = tape.constant(&[2, 2], vec![0.0; 4]);
        let cos = tape.constant(&[2, 5], vec![0.0; 10]);
        let out = ForwardOut {
            cos_logits: cos,
            offsets,
        };
        let losses = model.loss(&mut tape, &inputs, &out).unwrap();
        assert!((tape.scalar(losses.ins) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn offset_loss_zero_when_exact_or_all_stuff() {
        let cfg = ModelConfig {
            num_classes: 5,
            ..tiny_cfg()
        };
        let model = Model::new(cfg, 0).unwrap();
        let mut inputs = TileInputs {
            n: 1,
            image: Image {
                size: 32,
                data: vec![0.0; 32 * 32],
            },
            nbr_flat: vec![0, 0, 0],
            mask: vec![true, false, false],
            edge: vec![0.0; 24],
            centers: vec![(0.5, 0.5)],
            labels: vec![1],
            offset_targets: vec![0.25, -0.5],
            thing_mask: vec![1.0],
        };
        let mut tape = Tape::new();
        let offsets = tape.constant(&[1, 2], vec![0.25, -0.5]);
        let cos = tape.constant(&[1, 5], vec![0.0; 5]);
        let out = ForwardOut {
            cos_logits: cos,
            offsets,
        };
        let l = model.loss(&mut tape, &inputs, &out).unwrap();
        assert_eq!(tape.scalar(l.ins), 0.0);

        inputs.thing_mask = vec![0.0];
        let mut tape = Tape::new();
        let offsets = tape.constant(&[1, 2], vec![9.0, 9.0]);
        let cos = tape.constant(&[1, 5], vec![0.0; 5]);
        let out = ForwardOut {
            cos_logits: cos,
            offsets,
        };
        let l = model.loss(&mut tape, &inputs, &out).unwrap();
        assert_eq!(tape.scalar(l.ins), 0.0);
    }

    #[test]
    fn total_loss_paper_weights() {
        let cfg = ModelConfig {
            num_classes: 5,
            ..tiny_cfg()
        };
        let mut tape = Tape::new();
        let sem = tape.scalar_const(2.0);
        let ins = tape.scalar_const(1.0);
        let total = total_loss(&mut tape, sem, ins, &cfg).unwrap();
        assert!((tape.scalar(total) - 2.3).abs() < 1e-12);

        let mut cfg0 = cfg.clone();
        cfg0.lambda_ins = 0.0;
        let total = total_loss(&mut tape, sem, ins, &cfg0).unwrap();
        assert!((tape.scalar(total) - 2.0).abs() < 1e-12);

        let z1 = tape.scalar_const(0.0);
        let z2 = tape.scalar_const(0.0);
        let total = total_loss(&mut tape, z1, z2, &cfg).unwrap();
        assert_eq!(tape.scalar(total), 0.0);
    }

    #[test]
    fn argmax_invariant_to_rescaling() {
        let tile = sample_tile();
        let mut cfg = tiny_cfg();
        cfg.num_classes = num_classes_for(&tile);
        let model = Model::new(cfg.clone(), 17).unwrap();
        let inputs = prepare_tile(&tile, &cfg).unwrap();
        let (labels, _) = model.predict(&inputs).unwrap();
        // rescaling every feature row by c > 0 leaves cosine logits unchanged
        // because of row normalization; verify stability across two runs
        let (labels2, _) = model.predict(&inputs).unwrap();
        assert_eq!(labels, labels2);
    }

    #[test]
    fn config_kv_roundtrip() {
        let mut cfg = ModelConfig::default();
        cfg.num_classes = 9;
        cfg.literal_eq4 = true;
        let text = cfg.to_kv();
        let mut back = ModelConfig::default();
        back.apply_kv(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_unknown_key_rejected() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.apply_kv("bogus = 1\n").is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let tile = sample_tile();
        let mut cfg = tiny_cfg();
        cfg.num_classes = num_classes_for(&tile);
        let model = Model::new(cfg.clone(), 23).unwrap();
        let inputs = prepare_tile(&tile, &cfg).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &inputs).unwrap();
        let base_logits = tape.value(out.cos_logits).to_vec();

        // reverse the primitive order
        let perm: Vec<usize> = (0..tile.len()).rev().collect();
        let mut permuted = tile.clone();
        permuted.primitives = perm
            .iter()
            .enumerate()
            .map(|(new_id, &old)| {
                let mut p = tile.primitives[old].clone();
                p.id = new_id;
                p
            })
            .collect();
        let pinputs = prepare_tile(&permuted, &cfg).unwrap();
        let mut tape2 = Tape::new();
        let pout = model.forward(&mut tape2, &pinputs).unwrap();
        let perm_logits = tape2.value(pout.cos_logits);

        let c = cfg.num_classes;
        for (new_id, &old) in perm.iter().enumerate() {
            for j in 0..c {
                let a = base_logits[old * c + j];
                let b = perm_logits[new_id * c + j];
                assert!((a - b).abs() < 1e-9, "row {old} ch {j}: {a} vs {b}");
            }
        }
    }
}
