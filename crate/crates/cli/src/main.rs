use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use symspot::autodiff::{gradient_check, ParamStore, Tape};
use symspot::ingest::{
    self, canonical, parse_drawing, DatasetManifest, Format, Split, TileSpec,
};
use symspot::metrics::{ground_truth_symbols, match_symbols, Accumulator};
use symspot::model::{validate_drawing, Drawing};
use symspot::network::{Model, ModelConfig};
use symspot::render::render_overlay;
use symspot::spotting::{spot_from_predictions, SpotConfig, SpottingResult};
use symspot::synth::{generate_dataset, SynthConfig};
use symspot::textint::build_corpus_stats;
use symspot::trainer::{self, history_csv, strip_text, TrainConfig};

#[derive(Parser)]
#[command(name = "symspot", version, about = "Panoptic symbol spotting for vector drawings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a drawing, validate it, split it into tiles, and write a dataset.
    Ingest {
        /// Input drawing file.
        input: PathBuf,
        #[arg(long, default_value = "canonical-json")]
        format: Format,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 14.0)]
        tile_size: f64,
    },
    /// Build text corpus statistics from a dataset's training split.
    Stats {
        /// Dataset directory containing manifest.json.
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with exact ground truth.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        tiles: usize,
        #[arg(long, default_value_t = 1.0)]
        text_rate: f64,
    },
    /// Train a model on a dataset.
    Train {
        /// Dataset directory containing manifest.json.
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_text: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        no_text: bool,
    },
    /// Run inference on a single tile and write per-primitive predictions.
    Spot {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_text: bool,
    },
    /// Render a tile as a side-by-side SVG overlay.
    Render {
        input: PathBuf,
        /// Prediction file from `spot`; without it the right panel repeats
        /// the ground truth.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients of a small random model against finite
    /// differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// key=value model config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    literal_eq4: bool,
    #[arg(long)]
    zero_edge_bias: bool,
}

fn load_manifest(data: &Path) -> anyhow::Result<DatasetManifest> {
    let bytes = std::fs::read(data.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn load_split(data: &Path, m: &DatasetManifest, split: Split) -> anyhow::Result<Vec<Drawing>> {
    m.paths(split)
        .map(|rel| {
            let bytes = std::fs::read(data.join(rel))?;
            Ok(canonical::parse_canonical(&bytes)?)
        })
        .collect()
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(symspot::Error::Config(format!("unknown split '{other}'")).into()),
    }
}

fn load_model(config: &Path, checkpoint: &Path) -> anyhow::Result<Model> {
    let mut cfg = ModelConfig::default();
    cfg.apply_kv(&std::fs::read_to_string(config)?)?;
    cfg.validate()?;
    let store = ParamStore::load_file(checkpoint)?;
    Ok(Model { cfg, store })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            format,
            out_dir,
            tile_size,
        } => {
            let bytes = std::fs::read(&input)?;
            let (drawing, skipped) = parse_drawing(&bytes, format)?;
            for s in &skipped {
                eprintln!("skipped unsupported element: {s}");
            }
            let violations = validate_drawing(&drawing);
            for v in &violations {
                eprintln!("validation: {v}");
            }
            if !violations.is_empty() {
                return Err(symspot::Error::Schema(format!(
                    "{} validation violations",
                    violations.len()
                ))
                .into());
            }
            let spec = TileSpec {
                tile_size,
                ..Default::default()
            };
            let tiles = ingest::tile_drawing(&drawing, &spec)?;
            std::fs::create_dir_all(out_dir.join("tiles"))?;
            let mut entries = Vec::new();
            for (i, tile) in tiles.iter().enumerate() {
                let rel = format!("tiles/tile_{i:04}.json");
                std::fs::write(out_dir.join(&rel), canonical::serialize_drawing(tile))?;
                entries.push((rel, Split::Train));
            }
            let manifest = DatasetManifest {
                tiles: entries,
                classes: drawing.classes.clone(),
                stats_path: None,
            };
            std::fs::write(
                out_dir.join("manifest.json"),
                serde_json::to_string_pretty(&manifest)? + "\n",
            )?;
            println!(
                "ingested {} primitives into {} tiles ({} elements skipped)",
                drawing.len(),
                tiles.len(),
                skipped.len()
            );
        }

        Command::Stats { data, out } => {
            let manifest = load_manifest(&data)?;
            let tiles = load_split(&data, &manifest, Split::Train)?;
            let stats = build_corpus_stats(&tiles);
            let text = stats.to_text();
            match out {
                Some(p) => {
                    std::fs::write(&p, &text)?;
                    println!("wrote {} tokens to {}", stats.counts.len(), p.display());
                }
                None => print!("{text}"),
            }
        }

        Command::Synth {
            out_dir,
            seed,
            tiles,
            text_rate,
        } => {
            let cfg = SynthConfig {
                seed,
                tiles,
                text_rate,
                ..Default::default()
            };
            let manifest = generate_dataset(&cfg, &out_dir)?;
            println!(
                "generated {} tiles ({} train / {} val / {} test) in {}",
                manifest.tiles.len(),
                manifest.paths(Split::Train).count(),
                manifest.paths(Split::Val).count(),
                manifest.paths(Split::Test).count(),
                out_dir.display()
            );
        }

        Command::Train {
            data,
            out_dir,
            model,
            epochs,
            lr,
            seed,
            no_text,
        } => {
            let manifest = load_manifest(&data)?;
            let mut model_cfg = ModelConfig::default();
            if let Some(path) = &model.config {
                model_cfg.apply_kv(&std::fs::read_to_string(path)?)?;
            }
            model_cfg.literal_eq4 |= model.literal_eq4;
            model_cfg.zero_edge_bias |= model.zero_edge_bias;
            let max_class = manifest.classes.iter().map(|c| c.id).max().unwrap_or(0);
            model_cfg.num_classes = max_class as usize + 2;
            model_cfg.validate()?;
            let cfg = TrainConfig {
                epochs,
                lr,
                seed,
                no_text,
                model: model_cfg,
                ..Default::default()
            };
            print!("{}", cfg.model.to_kv());
            println!(
                "epochs = {epochs}\nlr = {lr}\nseed = {seed}\nno_text = {no_text}\nbatch_size = {}",
                cfg.batch_size
            );

            let train_tiles = load_split(&data, &manifest, Split::Train)?;
            let val_tiles = load_split(&data, &manifest, Split::Val)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut progress = |r: &trainer::EpochRecord| {
                println!(
                    "epoch {:>3}  loss {:.4}  sem {:.4}  ins {:.4}  val PQ {:.4}  lr {:.2e}",
                    r.epoch, r.loss, r.sem, r.ins, r.val_pq, r.lr
                );
            };
            let out = trainer::train(&cfg, &train_tiles, &val_tiles, Some(&mut progress))?;
            out.best_store.save_file(&out_dir.join("checkpoint.bin"))?;
            std::fs::write(out_dir.join("model.kv"), cfg.model.to_kv())?;
            std::fs::write(out_dir.join("history.csv"), history_csv(&out.history))?;
            println!(
                "best val PQ {:.4} at epoch {}; checkpoint written to {}",
                out.best_pq,
                out.best_epoch,
                out_dir.join("checkpoint.bin").display()
            );
        }

        Command::Eval {
            data,
            checkpoint,
            config,
            split,
            no_text,
        } => {
            let manifest = load_manifest(&data)?;
            let model = load_model(&config, &checkpoint)?;
            let tiles = load_split(&data, &manifest, parse_split(&split)?)?;
            let (scores, report) =
                trainer::evaluate(&model, &tiles, &SpotConfig::default(), no_text)?;
            println!(
                "PQ {:.4}  RQ {:.4}  SQ {:.4}  (TP {} FP {} FN {})",
                scores.pq, scores.rq, scores.sq, scores.tp, scores.fp, scores.fn_count
            );
            println!(
                "primitive accuracy {:.4}  micro F1 {:.4}",
                report.accuracy(),
                report.micro_f1()
            );
        }

        Command::Spot {
            input,
            checkpoint,
            config,
            out,
            no_text,
        } => {
            let model = load_model(&config, &checkpoint)?;
            let bytes = std::fs::read(&input)?;
            let tile = canonical::parse_canonical(&bytes)?;
            let tile = if no_text { strip_text(&tile) } else { tile };
            let norm = ingest::normalize_coords(&tile)?;
            let inputs = symspot::network::prepare_tile(&norm, &model.cfg)?;
            let (labels, offsets) = model.predict(&inputs)?;
            let result = spot_from_predictions(
                &norm,
                &model.cfg,
                &inputs.centers,
                &labels,
                &offsets,
                &SpotConfig::default(),
            )?;
            std::fs::write(&out, result.to_json())?;

            let gts = ground_truth_symbols(&norm);
            let m = match_symbols(&result.symbols, &gts, &norm)?;
            let mut acc = Accumulator::default();
            acc.add(&m, &result.symbols, &gts);
            let s = acc.scores();
            println!(
                "spotted {} symbols (tile PQ {:.4}); predictions written to {}",
                result.symbols.len(),
                s.pq,
                out.display()
            );
        }

        Command::Render { input, pred, out } => {
            let bytes = std::fs::read(&input)?;
            let tile = canonical::parse_canonical(&bytes)?;
            let labels: Vec<u32> = match pred {
                Some(p) => {
                    let parsed = SpottingResult::from_json(&std::fs::read(&p)?)?;
                    if parsed.labels.len() != tile.len() {
                        return Err(symspot::Error::Schema(format!(
                            "prediction has {} rows, tile has {}",
                            parsed.labels.len(),
                            tile.len()
                        ))
                        .into());
                    }
                    parsed.labels
                }
                None => tile.primitives.iter().map(|p| p.label).collect(),
            };
            std::fs::write(&out, render_overlay(&tile, &labels))?;
            println!("wrote {}", out.display());
        }

        Command::Gradcheck { seed, tolerance } => {
            let tile = symspot::synth::generate_tile(
                &SynthConfig {
                    seed,
                    clutter: 1,
                    min_symbols: 2,
                    max_symbols: 3,
                    ..Default::default()
                },
                0,
            );
            let cfg = ModelConfig {
                stages: 1,
                heads: 2,
                dim: 8,
                edge_hidden: 6,
                ffn_hidden: 12,
                offset_hidden: 6,
                k: 4,
                num_classes: tile.num_model_classes(),
                extractor: symspot::raster::ExtractorConfig {
                    raster_size: 16,
                    channels: 4,
                    stage_channels: [2, 3],
                    ..Default::default()
                },
                ..Default::default()
            };
            let mut model = Model::new(cfg.clone(), seed)?;
            // move off exact ReLU kinks (zero conv biases on empty raster)
            model.store.perturb(seed, 0.05);
            let norm = ingest::normalize_coords(&tile)?;
            let inputs = symspot::network::prepare_tile(&norm, &cfg)?;
            let f = |store: &ParamStore, tape: &mut Tape| {
                let m = Model {
                    cfg: cfg.clone(),
                    store: store.clone(),
                };
                let out = m.forward(tape, &inputs)?;
                Ok(m.loss(tape, &inputs, &out)?.total)
            };
            let max_err = gradient_check(&model.store, &f, 1e-5, 2, seed)?;
            println!("max relative gradient error: {max_err:.3e}");
            if max_err > tolerance {
                return Err(
                    symspot::Error::Numeric(format!("gradient check failed: {max_err:.3e}")).into(),
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<symspot::Error>(),
                Some(symspot::Error::Config(_))
            );
            if usage {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
