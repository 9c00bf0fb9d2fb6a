//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.
//! Results go to stdout or files, diagnostics to stderr.
//!
//! `--config FILE` reads `flag = value` lines (flag names without the
//! leading dashes; `#` comments). They are applied before the command-line
//! flags, so flags given explicitly win. An unknown name is rejected like
//! an unknown flag.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::{kmeans_anchors, AnchorSet};
use crate::dataset::convert::{classes_in_order, image_path, read_corner_csv};
use crate::dataset::image_io::image_dimensions;
use crate::dataset::manifest::{file_stem, list_images, read_class_names, CLASSES_FILE, IMAGES_DIR};
use crate::dataset::synth::write_synthetic_dataset;
use crate::dataset::{convert_corner_dataset, parse_label_file, DatasetManifest, PlanarImage, SceneSpec};
use crate::eval::{evaluate, time_runs, ImageEval, ScoredBox, TruthBox};
use crate::geometry::{center_to_corner, CornerBox};
use crate::inference::{
    detect_image, detect_tiled, format_detections, parse_detections, plan_tiles, render_detections, Detection,
    TileOptions,
};
use crate::network::checkpoint;
use crate::network::{Network, NetworkConfig};
use crate::trainer::{train, loss_csv, Control, TrainConfig, TrainOptions};
use crate::Error;

pub const THREADS_ENV: &str = "GRIDSPOT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gridspot", version, about = "Fine-grid single-shot detector for small objects in overhead imagery")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads [default: GRIDSPOT_THREADS, else all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flag overlay file of `flag = value` lines [default: none]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert pixel corner boxes (CSV) into normalized label files
    Convert(ConvertArgs),
    /// Generate a synthetic dataset
    Synth(SynthArgs),
    /// Fit anchor priors to the label shapes
    Anchors(AnchorsArgs),
    /// Train a detector
    Train(TrainArgs),
    /// Detect objects in an image, a directory of images, or tiles of a large image
    Detect(DetectArgs),
    /// Score detections against ground truth
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// CSV rows `image,class,x_min,y_min,x_max,y_max[,width,height]`
    #[arg(long)]
    pub csv: PathBuf,
    /// Dataset root; images are read from ROOT/images, labels written to ROOT/labels
    #[arg(long)]
    pub root: PathBuf,
    /// Comma-separated class names [default: order of first appearance]
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset root
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Square image side in pixels
    #[arg(long, default_value_t = 416)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 5)]
    pub max_objects: usize,
    /// Smallest object extent in pixels
    #[arg(long, default_value_t = 8.0)]
    pub min_size: f64,
    /// Largest object extent in pixels
    #[arg(long, default_value_t = 32.0)]
    pub max_size: f64,
    #[arg(long, default_value = "aircraft")]
    pub class: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AnchorsArgs {
    /// Directory of label files
    #[arg(long)]
    pub labels: PathBuf,
    /// Number of priors
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output anchors file
    #[arg(long, default_value = "anchors.txt")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root (classes.txt, images/, labels/)
    #[arg(long)]
    pub data: PathBuf,
    /// Anchors file [default: fitted to the training split with k=5]
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    /// Output directory for checkpoints and the loss curve
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Initial weights [default: random initialization]
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Base input size
    #[arg(long, default_value_t = 416)]
    pub size: usize,
    /// Fraction of images used for training; the rest are listed in OUT/val.txt
    #[arg(long, default_value_t = 0.9)]
    pub split: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Epochs between input-size redraws; 0 disables
    #[arg(long, default_value_t = 10)]
    pub multiscale_period: usize,
    /// Candidate input sizes
    #[arg(long, value_delimiter = ',', default_value = "320,336,352,368,384,400,416,432,448,464,480,496,512")]
    pub scale_set: Vec<usize>,
    /// Epochs after which the learning rate drops tenfold [default: none]
    #[arg(long, value_delimiter = ',')]
    pub lr_steps: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub warmup_epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
    /// Random flips and brightness jitter
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub augment: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Checkpoint file
    #[arg(long)]
    pub weights: PathBuf,
    /// Image file or directory of images
    #[arg(long)]
    pub image: PathBuf,
    /// Tile side in pixels; 0 runs each image whole
    #[arg(long, default_value_t = 0)]
    pub tile: usize,
    /// Tile overlap in pixels
    #[arg(long, default_value_t = 96)]
    pub overlap: usize,
    /// Network input size [default: from the checkpoint]
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = crate::inference::DEFAULT_CONF_THRESHOLD)]
    pub conf: f64,
    /// IoU above which NMS suppresses a detection
    #[arg(long, default_value_t = crate::inference::DEFAULT_IOU_THRESHOLD)]
    pub nms: f64,
    /// Keep only detections centered in the region each tile owns
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub ownership: bool,
    /// Detections file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for images with the detections drawn [default: none]
    #[arg(long)]
    pub render: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections file; omit to run --weights over the images instead
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Checkpoint to run and time [default: none]
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Directory of ground-truth label files
    #[arg(long)]
    pub truth: PathBuf,
    /// Directory of the images [default: TRUTH/../images]
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// IoU needed for a match
    #[arg(long, default_value_t = crate::eval::DEFAULT_MATCH_IOU)]
    pub iou: f64,
    /// Timed inference runs when evaluating --weights
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long, default_value_t = crate::inference::DEFAULT_CONF_THRESHOLD)]
    pub conf: f64,
    #[arg(long, default_value_t = crate::inference::DEFAULT_IOU_THRESHOLD)]
    pub nms: f64,
    /// Also write the key=value report here [default: none]
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn require_file(p: &Path, what: &str) -> Result<(), Error> {
    if p.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} is not a file", p.display())))
    }
}

fn require_dir(p: &Path, what: &str) -> Result<(), Error> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} is not a directory", p.display())))
    }
}

/// Reads a `--config` overlay into `--flag=value` tokens.
fn overlay_tokens(path: &Path) -> Result<Vec<OsString>, Error> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("config {} line {}: expected flag = value", path.display(), i + 1)))?;
        let k = k.trim().trim_start_matches("--").replace('_', "-");
        if k == "config" {
            return Err(invalid(format!("config {} line {}: nested config", path.display(), i + 1)));
        }
        out.push(format!("--{k}={}", v.trim()).into());
    }
    Ok(out)
}

/// Finds `--config` in the raw arguments and splices its flags in directly
/// after the subcommand name.
fn apply_overlay(args: Vec<OsString>) -> Result<Vec<OsString>, Error> {
    let mut config = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        }
    }
    let Some(path) = config else { return Ok(args) };
    let tokens = overlay_tokens(&path)?;
    let sub = args
        .iter()
        .skip(1)
        .position(|a| {
            let s = a.to_string_lossy();
            ["convert", "synth", "anchors", "train", "detect", "eval"].contains(&s.as_ref())
        })
        .map(|p| p + 2);
    let Some(at) = sub else { return Ok(args) };
    let mut out = args[..at].to_vec();
    out.extend(tokens);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if let Some(n) = flag {
        return if n == 0 { Err(invalid("--threads must be at least 1")) } else { Ok(Some(n)) };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(invalid(format!("{THREADS_ENV}='{v}' is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

/// Parses and runs a command line; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let args = match apply_overlay(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    let threads = thread_count(cli.threads)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| invalid(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Convert(a) => cmd_convert(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Anchors(a) => cmd_anchors(a),
        Command::Train(a) => cmd_train(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
    })
}

fn cmd_convert(a: ConvertArgs) -> Result<(), Error> {
    require_file(&a.csv, "--csv")?;
    require_dir(&a.root.join(IMAGES_DIR), "images directory")?;
    let csv = read_corner_csv(&a.csv)?;
    let classes = if a.classes.is_empty() { classes_in_order(&csv.records) } else { a.classes.clone() };
    if classes.is_empty() {
        return Err(invalid(format!("{}: no records", a.csv.display())));
    }
    let mut sizes = csv.sizes.clone();
    for r in &csv.records {
        if !sizes.contains_key(&r.image) {
            let p = image_path(&a.root, &r.image);
            if p.is_file() {
                sizes.insert(r.image.clone(), image_dimensions(&p)?);
            }
        }
    }
    let conv = convert_corner_dataset(&a.root, &csv.records, &sizes, &classes);
    for e in &conv.errors {
        eprintln!("warning: record {} ({}): {}", e.index + 1, e.image, e.error);
    }
    conv.manifest.write()?;
    println!(
        "converted {} images, {} objects, {} records skipped",
        conv.manifest.items.len(),
        conv.manifest.object_count(),
        conv.errors.len()
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Error> {
    let spec = SceneSpec {
        width: a.size,
        height: a.size,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        min_size: a.min_size,
        max_size: a.max_size,
        ..SceneSpec::default()
    };
    println!("seed={}", a.seed);
    let m = write_synthetic_dataset(&a.out, &spec, a.count, a.seed, &a.class)?;
    println!("wrote {} images with {} objects to {}", m.items.len(), m.object_count(), a.out.display());
    Ok(())
}

/// Label files in `dir` (all `*.txt` except `classes.txt`), keyed by stem.
/// Class ids are checked against a sibling `classes.txt` when one exists.
fn read_labels_dir(dir: &Path) -> Result<Vec<(String, Vec<crate::dataset::Annotation>)>, Error> {
    require_dir(dir, "labels directory")?;
    let classes = dir.parent().map(|p| p.join(CLASSES_FILE)).filter(|p| p.is_file());
    let class_count = match classes {
        Some(p) => read_class_names(&p)?.len(),
        None => usize::MAX,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt") && p.file_name().is_some_and(|n| n != CLASSES_FILE))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            let anns = parse_label_file(&text, class_count).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            Ok((file_stem(&p), anns))
        })
        .collect()
}

fn cmd_anchors(a: AnchorsArgs) -> Result<(), Error> {
    let labels = read_labels_dir(&a.labels)?;
    let shapes: Vec<(f64, f64)> =
        labels.iter().flat_map(|(_, anns)| anns.iter().map(|x| (x.bbox.w, x.bbox.h))).collect();
    println!("seed={}", a.seed);
    let set = kmeans_anchors(&shapes, a.k, a.seed)?;
    set.save(&a.out)?;
    print!("{}", set.to_file_string());
    println!("boxes={} k={} mean_iou={:.6}", shapes.len(), a.k, set.mean_iou);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    require_dir(&a.data, "--data")?;
    if !(a.split > 0.0 && a.split <= 1.0) {
        return Err(invalid(format!("--split must be in (0, 1], got {}", a.split)));
    }
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        multiscale_period: a.multiscale_period,
        scale_set: a.scale_set.clone(),
        seed: a.seed,
        lr_steps: a.lr_steps.clone(),
        warmup_epochs: a.warmup_epochs,
        checkpoint_every: a.checkpoint_every,
        augment: a.augment,
    };
    cfg.validate()?;
    if let Some(p) = &a.anchors {
        require_file(p, "--anchors")?;
    }
    if let Some(p) = &a.weights {
        require_file(p, "--weights")?;
    }
    let manifest = DatasetManifest::load(&a.data)?;
    if manifest.items.is_empty() {
        return Err(invalid(format!("{}: no images", a.data.display())));
    }
    let mut order: Vec<usize> = (0..manifest.items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(a.seed));
    let n_train = ((manifest.items.len() as f64 * a.split).round() as usize).clamp(1, manifest.items.len());
    let (train_idx, val_idx) = order.split_at(n_train);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let subset = DatasetManifest {
        items: train_idx.iter().map(|&i| manifest.items[i].clone()).collect(),
        ..manifest.clone()
    };

    let anchors = match &a.anchors {
        Some(p) => AnchorSet::load(p)?,
        None => {
            let shapes: Vec<(f64, f64)> = subset
                .items
                .iter()
                .flat_map(|it| it.annotations.iter().map(|x| (x.bbox.w, x.bbox.h)))
                .collect();
            kmeans_anchors(&shapes, crate::anchors::DEFAULT_ANCHOR_COUNT, a.seed)?
        }
    };
    let mut net = match &a.weights {
        Some(p) => {
            let n = checkpoint::load::<f32>(p)?.network;
            if n.config().anchors != anchors.priors && a.anchors.is_some() {
                return Err(invalid("--anchors differ from the anchors stored in --weights"));
            }
            if n.config().class_names != manifest.class_names {
                return Err(invalid("dataset classes differ from the classes stored in --weights"));
            }
            let mut cfg = n.config().clone();
            cfg.input_size = a.size;
            let mut fresh = Network::<f32>::new(cfg, 0)?;
            for (dst, src) in fresh.state_blocks_mut().into_iter().zip(n.state_blocks()) {
                dst.copy_from_slice(src);
            }
            fresh
        }
        None => Network::<f32>::new(NetworkConfig::tiny16(a.size, anchors.priors.clone(), manifest.class_names.clone()), a.seed)?,
    };

    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let val_list: String = val_idx
        .iter()
        .map(|&i| format!("{}\n", manifest.items[i].image_path.strip_prefix(&a.data).unwrap_or(&manifest.items[i].image_path).display()))
        .collect();
    let val_path = a.out.join("val.txt");
    fs::write(&val_path, val_list).map_err(io_err(&val_path))?;
    let anchors_path = a.out.join("anchors.txt");
    AnchorSet::from_priors(net.config().anchors.clone())?.save(&anchors_path)?;
    let cfg_path = a.out.join("train.conf");
    fs::write(&cfg_path, cfg.to_file_string()).map_err(io_err(&cfg_path))?;

    println!("seed={}", a.seed);
    println!("train_images={} val_images={}", subset.items.len(), val_idx.len());
    let mut progress = |r: &crate::trainer::EpochReport, _: &Network<f32>| {
        println!("epoch={} loss={:.6} size={} lr={:.3e}", r.epoch, r.loss, r.input_size, r.learning_rate);
        Control::Continue
    };
    let opts = TrainOptions { out_dir: Some(a.out.clone()), on_epoch: Some(&mut progress), ..TrainOptions::default() };
    let outcome = train(&mut net, &subset, &cfg, opts)?;
    debug_assert_eq!(loss_csv(&outcome.loss_curve).is_empty(), outcome.loss_curve.is_empty());
    println!("epochs={} final={}", outcome.epochs_run, a.out.join(crate::trainer::FINAL_CHECKPOINT).display());
    Ok(())
}

fn load_weights(path: &Path, size: Option<usize>) -> Result<Network<f32>, Error> {
    require_file(path, "--weights")?;
    let mut net = checkpoint::load::<f32>(path)?.network;
    if let Some(s) = size {
        net.set_input_size(s)?;
    }
    Ok(net)
}

fn input_images(p: &Path) -> Result<Vec<PathBuf>, Error> {
    if p.is_dir() {
        let v = list_images(p)?;
        if v.is_empty() {
            return Err(invalid(format!("{}: no images", p.display())));
        }
        Ok(v)
    } else if p.is_file() {
        Ok(vec![p.to_path_buf()])
    } else {
        Err(invalid(format!("--image {} does not exist", p.display())))
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Detections for one image, whole or tiled.
fn run_detector(net: &Network<f32>, img: &PlanarImage, tile: usize, overlap: usize, opts: &TileOptions) -> Result<Vec<Detection>, Error> {
    if tile == 0 {
        Ok(detect_image(net, img, opts)?)
    } else {
        let plan = plan_tiles(img.width, img.height, tile, overlap)?;
        Ok(detect_tiled(net, img, &plan, opts)?)
    }
}

fn cmd_detect(a: DetectArgs) -> Result<(), Error> {
    if a.tile > 0 && a.overlap >= a.tile {
        return Err(invalid(format!("--overlap {} must be smaller than --tile {}", a.overlap, a.tile)));
    }
    check_thresholds(a.conf, a.nms)?;
    let images = input_images(&a.image)?;
    let net = load_weights(&a.weights, a.size)?;
    let opts = TileOptions { conf_threshold: a.conf, iou_threshold: a.nms, ownership: a.ownership };
    if let Some(dir) = &a.render {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = String::new();
    for path in &images {
        let img = PlanarImage::load(path)?;
        let dets = run_detector(&net, &img, a.tile, a.overlap, &opts)?;
        let name = file_name(path);
        text.push_str(&format_detections(&name, &dets, &net.config().class_names, img.width, img.height));
        if let Some(dir) = &a.render {
            render_detections(&img, &dets).save(&dir.join(format!("{}.png", file_stem(path))))?;
        }
        eprintln!("{name}: {} detections", dets.len());
    }
    match &a.out {
        Some(p) => fs::write(p, text).map_err(io_err(p))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn check_thresholds(conf: f64, nms: f64) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&conf) {
        return Err(invalid(format!("--conf must be in [0, 1], got {conf}")));
    }
    if !(0.0..=1.0).contains(&nms) {
        return Err(invalid(format!("--nms must be in [0, 1], got {nms}")));
    }
    Ok(())
}

fn truth_boxes(anns: &[crate::dataset::Annotation], w: usize, h: usize) -> Result<Vec<TruthBox>, Error> {
    anns.iter()
        .map(|x| {
            let bbox = center_to_corner(&x.bbox, w as f64, h as f64).map_err(crate::dataset::DatasetError::from)?;
            Ok(TruthBox { class_id: x.class_id, bbox })
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(invalid(format!("--iou must be in (0, 1], got {}", a.iou)));
    }
    check_thresholds(a.conf, a.nms)?;
    let images_dir = a
        .images
        .clone()
        .unwrap_or_else(|| a.truth.parent().unwrap_or(Path::new(".")).join(IMAGES_DIR));
    let labels = read_labels_dir(&a.truth)?;
    if labels.is_empty() {
        return Err(invalid(format!("{}: no label files", a.truth.display())));
    }
    let class_names = a.truth.parent().map(|p| p.join(CLASSES_FILE)).filter(|p| p.is_file()).map(|p| read_class_names(&p)).transpose()?;
    require_dir(&images_dir, "images directory")?;
    let by_stem: HashMap<String, PathBuf> = list_images(&images_dir)?.into_iter().map(|p| (file_stem(&p), p)).collect();
    let mut items = Vec::with_capacity(labels.len());
    for (stem, anns) in &labels {
        let path = by_stem
            .get(stem)
            .ok_or_else(|| invalid(format!("no image for label file {stem}.txt in {}", images_dir.display())))?;
        items.push((stem.clone(), path.clone(), anns.clone()));
    }

    let (evals, timing) = match (&a.pred, &a.weights) {
        (Some(pred), None) => {
            require_file(pred, "--pred")?;
            let text = fs::read_to_string(pred).map_err(io_err(pred))?;
            let records = parse_detections(&text).map_err(|e| invalid(format!("{}: {e}", pred.display())))?;
            let mut per_stem: HashMap<String, Vec<ScoredBox>> = HashMap::new();
            for r in records {
                let stem = file_stem(Path::new(&r.image));
                let class_id = match &class_names {
                    Some(names) => names
                        .iter()
                        .position(|n| *n == r.class_name)
                        .ok_or_else(|| invalid(format!("{}: unknown class '{}'", pred.display(), r.class_name)))?,
                    None => 0,
                };
                if !by_stem.contains_key(&stem) {
                    return Err(invalid(format!("{}: detections for unknown image '{}'", pred.display(), r.image)));
                }
                per_stem.entry(stem).or_default().push(ScoredBox { class_id, score: r.score, bbox: r.bbox });
            }
            let mut evals = Vec::new();
            for (stem, path, anns) in &items {
                let (w, h) = image_dimensions(path)?;
                evals.push(ImageEval {
                    name: stem.clone(),
                    detections: per_stem.remove(stem).unwrap_or_default(),
                    truths: truth_boxes(anns, w, h)?,
                });
            }
            (evals, Vec::new())
        }
        (None, Some(weights)) => {
            if a.runs == 0 {
                return Err(invalid("--runs must be at least 1"));
            }
            let net = load_weights(weights, None)?;
            let opts = TileOptions { conf_threshold: a.conf, iou_threshold: a.nms, ownership: true };
            let pixels: Vec<PlanarImage> = items.iter().map(|(_, p, _)| PlanarImage::load(p)).collect::<Result<_, _>>()?;
            let mut last: Vec<Vec<Detection>> = Vec::new();
            let timing = time_runs(a.runs, || -> Result<(), Error> {
                last = pixels.iter().map(|img| Ok(detect_image(&net, img, &opts)?)).collect::<Result<_, Error>>()?;
                Ok(())
            })?;
            let mut evals = Vec::new();
            for ((stem, _, anns), (img, dets)) in items.iter().zip(pixels.iter().zip(&last)) {
                let detections = dets
                    .iter()
                    .map(|d| {
                        let b = d.bbox;
                        let (w, h) = (img.width as f64, img.height as f64);
                        let bbox = CornerBox { x_min: (b.x - b.w / 2.0) * w, y_min: (b.y - b.h / 2.0) * h, x_max: (b.x + b.w / 2.0) * w, y_max: (b.y + b.h / 2.0) * h };
                        ScoredBox { class_id: d.class_id, score: d.score, bbox }
                    })
                    .collect();
                evals.push(ImageEval { name: stem.clone(), detections, truths: truth_boxes(anns, img.width, img.height)? });
            }
            (evals, timing)
        }
        _ => return Err(invalid("give exactly one of --pred or --weights")),
    };
    let report = evaluate(&evals, a.iou, &timing)?;
    print!("{}", report.table());
    println!();
    print!("{}", report.key_values());
    if let Some(p) = &a.report {
        fs::write(p, report.key_values()).map_err(io_err(p))?;
    }
    Ok(())
}
