//! Training loop: Adam with a stepped learning-rate schedule, gradient
//! accumulation over small batches, per-epoch validation PQ on
//! f32-rounded parameters, and best-checkpoint tracking.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::ingest::normalize_coords;
use crate::metrics::{
    ground_truth_symbols, match_symbols, Accumulator, PanopticScores, PrimitiveReport,
};
use crate::model::Drawing;
use crate::network::{prepare_tile, Model, ModelConfig, TileInputs};
use crate::spotting::{spot_from_predictions, SpotConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Ablation: strip text primitives from every tile before training and
    /// evaluation.
    pub no_text: bool,
    pub model: ModelConfig,
    pub spot: SpotConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 2,
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 20,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            seed: 0,
            no_text: false,
            model: ModelConfig::default(),
            spot: SpotConfig::default(),
        }
    }
}

/// Stepped decay: lr * decay^(epoch / every).
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

/// One Adam update over every parameter present in `grads`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let p = store
            .get_mut(name)
            .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Drop text primitives and re-densify ids. Instance structure is unchanged
/// because text never belongs to an instance.
pub fn strip_text(d: &Drawing) -> Drawing {
    let mut out = d.clone();
    out.primitives.retain(|p| !p.geometry.is_text());
    for (new_id, p) in out.primitives.iter_mut().enumerate() {
        p.id = new_id;
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub sem: f64,
    pub ins: f64,
    pub val_pq: f64,
    pub val_rq: f64,
    pub val_sq: f64,
    pub lr: f64,
}

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,sem,ins,val_pq,val_rq,val_sq,lr\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.loss, r.sem, r.ins, r.val_pq, r.val_rq, r.val_sq, r.lr
        ));
    }
    s
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Parameters of the epoch with the best validation PQ, f32-rounded.
    pub best_store: ParamStore,
    pub best_pq: f64,
    pub best_epoch: usize,
}

fn prepared(tiles: &[Drawing], cfg: &TrainConfig) -> Result<Vec<(Drawing, TileInputs)>> {
    tiles
        .par_iter()
        .map(|t| {
            let t = if cfg.no_text { strip_text(t) } else { t.clone() };
            let norm = normalize_coords(&t)?;
            let inputs = prepare_tile(&norm, &cfg.model)?;
            Ok((norm, inputs))
        })
        .collect()
}

/// Evaluate a model over tiles: panoptic scores plus the per-primitive
/// semantic report.
pub fn evaluate(
    model: &Model,
    tiles: &[Drawing],
    spot_cfg: &SpotConfig,
    no_text: bool,
) -> Result<(PanopticScores, PrimitiveReport)> {
    let per_tile: Vec<_> = tiles
        .par_iter()
        .map(|tile| {
            let tile = if no_text { strip_text(tile) } else { tile.clone() };
            let norm = normalize_coords(&tile)?;
            let inputs = prepare_tile(&norm, &model.cfg)?;
            let (labels, offsets) = model.predict(&inputs)?;
            let result = spot_from_predictions(
                &norm,
                &model.cfg,
                &inputs.centers,
                &labels,
                &offsets,
                spot_cfg,
            )?;
            let gts = ground_truth_symbols(&norm);
            let m = match_symbols(&result.symbols, &gts, &norm)?;
            let gt_labels: Vec<u32> = norm.primitives.iter().map(|p| p.label).collect();
            Ok((m, result.symbols, gts, labels, gt_labels))
        })
        .collect::<Result<_>>()?;
    let mut acc = Accumulator::default();
    let mut report = PrimitiveReport::default();
    for (m, symbols, gts, labels, gt_labels) in &per_tile {
        acc.add(m, symbols, gts);
        report.add(labels, gt_labels);
    }
    Ok((acc.scores(), report))
}

/// Train from scratch. Validation runs each epoch on f32-rounded parameters
/// so a reloaded checkpoint reproduces its recorded PQ exactly.
pub fn train(
    cfg: &TrainConfig,
    train_tiles: &[Drawing],
    val_tiles: &[Drawing],
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutcome> {
    if train_tiles.is_empty() {
        return Err(Error::Config("no training tiles".into()));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let train_data = prepared(train_tiles, cfg)?;
    let val_data: Vec<Drawing> = if cfg.no_text {
        val_tiles.iter().map(strip_text).collect()
    } else {
        val_tiles.to_vec()
    };

    let mut adam = AdamState::default();
    let mut history = Vec::new();
    let mut best_pq = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_store = model.store.rounded_f32();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1));
        order.shuffle(&mut rng);

        let (mut loss_sum, mut sem_sum, mut ins_sum, mut tiles_seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            // per-tile gradients in parallel, merged in batch order so the
            // result is deterministic
            let per_tile: Vec<_> = batch
                .par_iter()
                .map(|&ti| {
                    let (_, inputs) = &train_data[ti];
                    let mut tape = Tape::new();
                    let out = model.forward(&mut tape, inputs)?;
                    let losses = model.loss(&mut tape, inputs, &out)?;
                    let g = tape.backward(losses.total)?;
                    Ok((
                        tape.scalar(losses.total),
                        tape.scalar(losses.sem),
                        tape.scalar(losses.ins),
                        tape.param_grads(&g),
                    ))
                })
                .collect::<Result<_>>()?;
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (total, sem, ins, tile_grads) in per_tile {
                loss_sum += total;
                sem_sum += sem;
                ins_sum += ins;
                tiles_seen += 1;
                for (name, grad) in tile_grads {
                    grads
                        .entry(name)
                        .and_modify(|acc| acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b))
                        .or_insert(grad);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
            adam_step(&mut model.store, &grads, &mut adam, lr, cfg);
        }

        // validate on the f32-rounded snapshot a checkpoint would contain
        let snapshot = model.store.rounded_f32();
        let val_model = Model {
            cfg: cfg.model.clone(),
            store: snapshot.clone(),
        };
        let (scores, _) = if val_data.is_empty() {
            (
                PanopticScores {
                    pq: 0.0,
                    rq: 0.0,
                    sq: 0.0,
                    tp: 0,
                    fp: 0,
                    fn_count: 0,
                    empty: true,
                },
                PrimitiveReport::default(),
            )
        } else {
            evaluate(&val_model, &val_data, &cfg.spot, false)?
        };

        let record = EpochRecord {
            epoch,
            loss: loss_sum / tiles_seen as f64,
            sem: sem_sum / tiles_seen as f64,
            ins: ins_sum / tiles_seen as f64,
            val_pq: scores.pq,
            val_rq: scores.rq,
            val_sq: scores.sq,
            lr,
        };
        if scores.pq > best_pq {
            best_pq = scores.pq;
            best_epoch = epoch;
            best_store = snapshot;
        }
        if let Some(cb) = progress.as_deref_mut() {
            cb(&record);
        }
        history.push(record);
    }

    Ok(TrainOutcome {
        history,
        best_store,
        best_pq: best_pq.max(0.0),
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ExtractorConfig;
    use crate::synth::{generate_tile, SynthConfig};

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            lr: 3e-3,
            seed: 1,
            model: ModelConfig {
                stages: 1,
                heads: 2,
                dim: 8,
                edge_hidden: 8,
                ffn_hidden: 16,
                offset_hidden: 8,
                k: 6,
                num_classes: 8,
                extractor: ExtractorConfig {
                    raster_size: 32,
                    channels: 4,
                    stage_channels: [2, 3],
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = TrainConfig {
            lr: 1e-3,
            ..Default::default()
        };
        assert_eq!(lr_schedule(&cfg, 0), 1e-3);
        assert_eq!(lr_schedule(&cfg, 19), 1e-3);
        assert_eq!(lr_schedule(&cfg, 20), 5e-4);
        assert_eq!(lr_schedule(&cfg, 39), 5e-4);
        assert_eq!(lr_schedule(&cfg, 40), 2.5e-4);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // with a constant gradient the first step is lr / (1 + eps/|g|) ~ lr
        let cfg = TrainConfig::default();
        let mut store = ParamStore::new();
        store.insert("p", &[2], vec![1.0, -1.0]);
        let mut state = AdamState::default();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![0.5, -2.0]);
        adam_step(&mut store, &grads, &mut state, 1e-3, &cfg);
        let p = store.get("p").unwrap();
        assert!((p.data[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.data[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = TrainConfig::default();
        let run = || {
            let mut store = ParamStore::new();
            store.insert("p", &[1], vec![0.3]);
            let mut state = AdamState::default();
            for step in 0..5 {
                let mut grads = BTreeMap::new();
                grads.insert("p".to_string(), vec![0.1 * (step + 1) as f64]);
                adam_step(&mut store, &grads, &mut state, 1e-2, &cfg);
            }
            store.get("p").unwrap().data[0]
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn strip_text_densifies_ids() {
        let tile = generate_tile(&SynthConfig::default(), 0);
        let had_text = tile.primitives.iter().any(|p| p.geometry.is_text());
        assert!(had_text);
        let stripped = strip_text(&tile);
        assert!(stripped.primitives.iter().all(|p| !p.geometry.is_text()));
        for (i, p) in stripped.primitives.iter().enumerate() {
            assert_eq!(p.id, i);
        }
        assert!(crate::model::validate_drawing(&stripped).is_empty());
    }

    #[test]
    fn short_run_decreases_loss() {
        let synth = SynthConfig {
            clutter: 1,
            min_symbols: 3,
            max_symbols: 4,
            ..Default::default()
        };
        let tiles: Vec<Drawing> = (0..4).map(|i| generate_tile(&synth, i)).collect();
        let cfg = tiny_train_cfg();
        let out = train(&cfg, &tiles, &tiles[..1], None).unwrap();
        assert_eq!(out.history.len(), 3);
        let first = out.history.first().unwrap().loss;
        let last = out.history.last().unwrap().loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let synth = SynthConfig {
            clutter: 1,
            min_symbols: 3,
            max_symbols: 3,
            ..Default::default()
        };
        let tiles: Vec<Drawing> = (0..2).map(|i| generate_tile(&synth, i)).collect();
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 2;
        let a = train(&cfg, &tiles, &[], None).unwrap();
        let b = train(&cfg, &tiles, &[], None).unwrap();
        assert_eq!(
            a.history.last().unwrap().loss,
            b.history.last().unwrap().loss
        );
    }

    #[test]
    fn checkpoint_reproduces_validation_pq() {
        let synth = SynthConfig {
            clutter: 1,
            min_symbols: 3,
            max_symbols: 4,
            ..Default::default()
        };
        let tiles: Vec<Drawing> = (0..3).map(|i| generate_tile(&synth, i)).collect();
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 2;
        let out = train(&cfg, &tiles, &tiles, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        out.best_store.save_file(&path).unwrap();
        let loaded = ParamStore::load_file(&path).unwrap();
        let model = Model {
            cfg: cfg.model.clone(),
            store: loaded,
        };
        let (scores, _) = evaluate(&model, &tiles, &cfg.spot, false).unwrap();
        let recorded = out
            .history
            .iter()
            .map(|r| r.val_pq)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(scores.pq, recorded);
    }

    #[test]
    fn history_csv_format() {
        let rec = EpochRecord {
            epoch: 0,
            loss: 1.5,
            sem: 1.0,
            ins: 0.5,
            val_pq: 0.25,
            val_rq: 0.5,
            val_sq: 0.5,
            lr: 1e-3,
        };
        let csv = history_csv(&[rec]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,loss,sem,ins,val_pq,val_rq,val_sq,lr"
        );
        assert_eq!(lines.next().unwrap(), "0,1.5,1,0.5,0.25,0.5,0.5,0.001");
    }
}
