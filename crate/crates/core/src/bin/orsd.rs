use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use orsd::geom::check::geom_check;
use orsd::geom::Detection;
use orsd::harness::io::*;
use orsd::harness::*;
use orsd::heads::InferenceHead;
use orsd::promptdict::{
    cluster_prompts, inference_prompts, sample_training_prompts_with, Modality, PromptDictionary,
};
use orsd::pseudolabel::{run_pipeline, CategoryTree, FilterConfig};
use orsd::{CategoryId, Error, Result, Vocabulary};

#[derive(Parser)]
#[command(
    name = "orsd",
    version,
    about = "Open-prompt oriented detection toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compare rotated IoU and enclosing boxes with sampling oracles.
    GeomCheck {
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 10_000)]
        boxes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cluster unlabeled object embeddings into synthetic image prompts.
    Cluster {
        #[arg(long)]
        k: usize,
        /// One vector per line.
        #[arg(long)]
        input: PathBuf,
        /// Dictionary to extend; otherwise a new one is written.
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long, default_value_t = 768)]
        text_dim: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a prompt batch from a dictionary.
    SamplePrompts {
        #[arg(long)]
        dict: PathBuf,
        /// Comma-separated category names present in the image.
        #[arg(long, value_delimiter = ',')]
        positives: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        hard_negatives: Vec<String>,
        #[arg(long, default_value_t = 20)]
        negatives: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Inference mode: this many prompts for every positive category.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "text")]
        modality: String,
    },
    /// Train the toy detector.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long, default_value = "orsd.ckpt")]
        out: PathBuf,
        /// Per-iteration metrics as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also write the dictionary and annotations of the run here.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// AP50 from files, or of a checkpoint on the config's eval scenes.
    Eval {
        #[arg(long, default_value = "obb")]
        mode: String,
        #[arg(long, requires = "annotations")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run a checkpoint on generated scenes and write predictions and
    /// similarities for pseudo labelling.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 3)]
        prompt_sets: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        similarities_out: Option<PathBuf>,
    },
    /// Filter model predictions into pseudo-label records.
    PseudoLabel {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        similarities: Option<PathBuf>,
        /// Category forest; every category is top-level when omitted.
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        score_thresh: f64,
        #[arg(long, default_value_t = 0.24)]
        sim_thresh: f64,
        #[arg(long, default_value_t = 16.0)]
        min_side: f64,
        #[arg(long, default_value_t = 0.5)]
        overlap_iou: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
        #[arg(long)]
        serial: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Under-labeled baseline, pseudo labels, and retraining.
    SelfTrain {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    modality: Option<String>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    prompt_count: Option<usize>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

type CliResult = std::result::Result<(), CliError>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Explicit flag, then `ORSD_SEED`, then 0.
fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    let mut cfg = RunConfig {
        seed: seed.unwrap_or(0),
        ..RunConfig::default()
    };
    if seed.is_none() {
        cfg.apply_env()?;
    }
    Ok(cfg.seed)
}

fn parse_modality(s: &str) -> std::result::Result<Modality, CliError> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn load_model(
    args: &ModelArgs,
) -> std::result::Result<(RunConfig, ToyData, ToyDetector, EvalSettings), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(m) = &args.modality {
        cfg.eval.modality = parse_modality(m)?;
    }
    if let Some(h) = &args.head {
        cfg.eval.head = match h.as_str() {
            "alignment" => InferenceHead::Alignment,
            "fusion" => InferenceHead::Fusion,
            other => return Err(usage(format!("unknown head `{other}`"))),
        };
    }
    if let Some(n) = args.prompt_count {
        cfg.eval.prompt_count = n;
    }
    cfg.validate()?;
    let ckpt = args
        .checkpoint
        .as_deref()
        .ok_or_else(|| usage("--checkpoint is required"))?;
    let data = ToyData::generate(&cfg)?;
    let mut model = ToyDetector::new(cfg.model.clone(), derive_seed(cfg.seed, SeedStream::Init))?;
    load_checkpoint(&mut model.store, ckpt)?;
    let settings = EvalSettings::from_config(&cfg);
    Ok((cfg, data, model, settings))
}

fn report_json(r: &ApReport, vocab: &Vocabulary, mode: EvalMode) -> Result<String> {
    let mut per_class = serde_json::Map::new();
    for (c, v) in &r.per_class {
        per_class.insert(vocab.name(*c)?.to_string(), json!(v));
    }
    let mode = match mode {
        EvalMode::Obb => "obb",
        EvalMode::Hbb => "hbb",
    };
    Ok(json!({ "mode": mode, "ap50": r.mean, "per_class": per_class }).to_string())
}

fn run(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::GeomCheck {
            pairs,
            samples,
            boxes,
            seed,
        } => {
            if samples == 0 {
                return Err(usage("--samples must be positive"));
            }
            let r = geom_check(pairs, samples, boxes, seed)?;
            println!("{}", serde_json::to_string(&r).map_err(Error::from)?);
            let ok = r.max_iou_error <= 5e-3
                && (r.square_45 - 0.7071).abs() <= 5e-3
                && r.hbb_mismatches == 0;
            if !ok {
                return Err(Error::Numeric("geometry check outside tolerance".into()).into());
            }
        }
        Cmd::Cluster {
            k,
            input,
            dict,
            text_dim,
            seed,
            out,
        } => {
            let points = read_vectors(&read(&input)?, &input.display().to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed_or_env(seed)?);
            let prompts = cluster_prompts(&points, k, &mut rng)?;
            let mut vocab = Vocabulary::new();
            let mut d = match &dict {
                Some(p) => read_dictionary(&read(p)?, &p.display().to_string(), &mut vocab)?,
                None => PromptDictionary::new(text_dim, points.first().map_or(0, Vec::len)),
            };
            for (i, p) in prompts.into_iter().enumerate() {
                vocab.intern_pseudo(i as u32);
                d.insert(p)?;
            }
            emit(out.as_deref(), &write_dictionary(&d, &vocab)?)?;
        }
        Cmd::SamplePrompts {
            dict,
            positives,
            hard_negatives,
            negatives,
            seed,
            count,
            modality,
        } => {
            let modality = parse_modality(&modality)?;
            let mut vocab = Vocabulary::new();
            let d = read_dictionary(&read(&dict)?, &dict.display().to_string(), &mut vocab)?;
            let ids = |names: &[String]| -> Result<BTreeSet<CategoryId>> {
                names
                    .iter()
                    .filter(|n| !n.is_empty())
                    .map(|n| vocab.id(n))
                    .collect()
            };
            let pos = ids(&positives)?;
            let hard = ids(&hard_negatives)?;
            if pos.is_empty() {
                return Err(usage("--positives needs at least one category"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed_or_env(seed)?);
            let batch = match count {
                Some(n) => inference_prompts(&pos, &d, modality, n, &mut rng)?,
                None => {
                    if modality != Modality::Text {
                        eprintln!(
                            "training batches draw their modality at random; --modality ignored"
                        );
                    }
                    sample_training_prompts_with(&pos, &hard, &d, negatives, &mut rng)?
                }
            };
            for (p, c) in batch.prompts.iter().zip(&batch.labels) {
                let role = if batch.positives.contains(c) {
                    "positive"
                } else {
                    "negative"
                };
                println!(
                    "{}",
                    json!({
                        "category": vocab.name(*c)?,
                        "modality": p.modality.as_str(),
                        "prompt_id": p.prompt_id,
                        "role": role,
                    })
                );
            }
        }
        Cmd::Train {
            config,
            out,
            log,
            data_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut lines = String::new();
            let (data, outcome) = train_toy(&cfg, |l| {
                lines.push_str(&serde_json::to_string(l).expect("log serializes"));
                lines.push('\n');
                if let Some(ap) = l.ap50 {
                    eprintln!("iter {} loss {:.4} ap50 {ap:.4}", l.iteration, l.loss);
                }
            })?;
            save_checkpoint(&outcome.model.store, &out)?;
            if let Some(p) = log {
                fs::write(p, lines)?;
            }
            if let Some(dir) = data_dir {
                fs::create_dir_all(&dir)?;
                fs::write(
                    dir.join("dictionary.tsv"),
                    write_dictionary(&data.dict, &data.vocab)?,
                )?;
                for (name, scenes) in [("train", &data.train), ("eval", &data.eval)] {
                    let anns: Vec<Annotation> = scenes.iter().map(Annotation::from_scene).collect();
                    fs::write(
                        dir.join(format!("{name}.jsonl")),
                        write_annotations(&anns, &data.vocab)?,
                    )?;
                }
            }
            let r = evaluate(
                &outcome.model,
                &data.eval,
                &data.dict,
                &EvalSettings::from_config(&cfg),
            )?;
            println!("{}", report_json(&r, &data.vocab, cfg.eval.mode)?);
        }
        Cmd::Eval {
            mode,
            predictions,
            annotations,
            model,
        } => {
            let mode: EvalMode = mode.parse().map_err(|e: Error| usage(e.to_string()))?;
            match (predictions, annotations) {
                (Some(pp), Some(ap)) => {
                    let mut vocab = Vocabulary::new();
                    let anns =
                        read_annotations(&read(&ap)?, &ap.display().to_string(), &mut vocab)?;
                    let sets =
                        read_predictions(&read(&pp)?, &pp.display().to_string(), &mut vocab)?;
                    let inputs = pipeline_inputs(&anns, &sets)?;
                    let preds: Vec<Vec<Detection>> =
                        inputs.iter().map(|i| i.predictions.concat()).collect();
                    let gt: Vec<Vec<Detection>> = inputs.iter().map(|i| i.gt.clone()).collect();
                    println!("{}", report_json(&ap50(&preds, &gt, mode)?, &vocab, mode)?);
                }
                (None, None) => {
                    let (_, data, m, mut s) = load_model(&model)?;
                    s.mode = mode;
                    let r = evaluate(&m, &data.eval, &data.dict, &s)?;
                    println!("{}", report_json(&r, &data.vocab, mode)?);
                }
                _ => return Err(usage("--predictions and --annotations go together")),
            }
        }
        Cmd::Predict {
            model,
            split,
            prompt_sets,
            out,
            similarities_out,
        } => {
            let (_, data, m, s) = load_model(&model)?;
            let scenes = match split.as_str() {
                "train" => &data.train,
                "eval" => &data.eval,
                other => return Err(usage(format!("unknown split `{other}`"))),
            };
            if prompt_sets == 0 {
                return Err(usage("--prompt-sets must be positive"));
            }
            let preds = predict_prompt_sets(&m, scenes, &data.dict, &s, prompt_sets)?;
            let sets: Vec<PredictionSet> = scenes
                .iter()
                .zip(&preds)
                .flat_map(|(sc, p)| {
                    p.iter().map(|d| PredictionSet {
                        image_id: sc.image_id.clone(),
                        detections: d.clone(),
                    })
                })
                .collect();
            fs::write(&out, write_predictions(&sets, &data.vocab)?)?;
            if let Some(sp) = similarities_out {
                let sims = scene_similarities(scenes, &preds, &data.palette)?;
                let mut entries = Vec::new();
                for (sc, p) in scenes.iter().zip(&preds) {
                    for (k, d) in p.iter().flatten().enumerate() {
                        let v = sims
                            .get(&sc.image_id, k, d.category)
                            .expect("similarity just computed");
                        entries.push((sc.image_id.as_str(), k, data.vocab.name(d.category)?, v));
                    }
                }
                fs::write(sp, write_similarities(entries)?)?;
            }
        }
        Cmd::PseudoLabel {
            annotations,
            predictions,
            similarities,
            tree,
            score_thresh,
            sim_thresh,
            min_side,
            overlap_iou,
            nms_iou,
            serial,
            out,
        } => {
            let cfg = FilterConfig {
                score_thresh,
                sim_thresh,
                min_side,
                overlap_iou,
                nms_iou,
            };
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let mut vocab = Vocabulary::new();
            let tree = match &tree {
                Some(p) => CategoryTree::from_json(&read(p)?, &mut vocab)?,
                None => CategoryTree::new(),
            };
            let anns = read_annotations(
                &read(&annotations)?,
                &annotations.display().to_string(),
                &mut vocab,
            )?;
            let sets = read_predictions(
                &read(&predictions)?,
                &predictions.display().to_string(),
                &mut vocab,
            )?;
            let sims = match &similarities {
                Some(p) => read_similarities(&read(p)?, &p.display().to_string(), &mut vocab)?,
                None => Default::default(),
            };
            let tree = if tree.is_empty() {
                let mut t = CategoryTree::new();
                let names: Vec<String> = vocab
                    .ids()
                    .map(|c| vocab.name(c).map(str::to_string))
                    .collect::<Result<_>>()?;
                for n in names {
                    t.add(&mut vocab, &n, None)?;
                }
                t
            } else {
                tree
            };
            let inputs = pipeline_inputs(&anns, &sets)?;
            let records = run_pipeline(&inputs, &tree, &sims, &cfg, !serial)?;
            emit(out.as_deref(), &write_records(&records, &vocab)?)?;
        }
        Cmd::SelfTrain { config } => {
            let cfg = load_config(config.as_deref())?;
            let data = ToyData::generate(&cfg)?;
            let r = run_self_training(&cfg, &data, |phase, l| {
                if l.iteration % 500 == 0 {
                    eprintln!("{phase} iter {} loss {:.4}", l.iteration, l.loss);
                }
            })?;
            println!(
                "{}",
                json!({
                    "baseline_ap50": r.baseline.mean,
                    "retrained_ap50": r.retrained.mean,
                    "pseudo_boxes": r.pseudo_boxes,
                })
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
