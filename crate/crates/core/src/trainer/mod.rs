//! Mini-batch SGD over a labeled image set with multiscale input sizes,
//! per-epoch checkpoints and a loss curve.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{Annotation, DatasetError, DatasetManifest, PlanarImage};
use crate::geometry::CenterBox;
use crate::network::checkpoint;
use crate::network::{assign_targets, detection_loss, LossConfig, Mode, Network, NetworkError, PredictionVolume, Tensor};

pub mod config;
pub mod letterbox;
pub mod sgd;

pub use config::TrainConfig;
pub use letterbox::{letterbox, Letterbox};
pub use sgd::{sgd_step, SgdConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("non-finite gradient in parameter block {block} at index {index}")]
    NonFiniteGradient { block: usize, index: usize },
    #[error("training diverged in epoch {epoch} ({reason}); weights restored to the end of epoch {}", epoch - 1)]
    Diverged { epoch: usize, reason: String, checkpoint: Option<PathBuf> },
    #[error("the training set is empty")]
    EmptyDataset,
}

/// Indexable labeled images.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, index: usize) -> Result<(PlanarImage, Vec<Annotation>), TrainError>;
}

impl SampleSource for DatasetManifest {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn sample(&self, index: usize) -> Result<(PlanarImage, Vec<Annotation>), TrainError> {
        let item = &self.items[index];
        Ok((PlanarImage::load(&item.image_path)?, item.annotations.clone()))
    }
}

impl SampleSource for Vec<(PlanarImage, Vec<Annotation>)> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn sample(&self, index: usize) -> Result<(PlanarImage, Vec<Annotation>), TrainError> {
        Ok(self[index].clone())
    }
}

/// Input size for each 1-based epoch (index 0 is epoch 1). Epochs
/// `1..=period` use `base`; at epochs `period + 1`, `2 * period + 1`, ... a
/// new size is drawn from `scale_set`, excluding the current one when the
/// set offers an alternative.
pub fn scale_schedule(cfg: &TrainConfig, base: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut size = base;
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if cfg.multiscale_period > 0 && epoch > 1 && (epoch - 1) % cfg.multiscale_period == 0 {
            let choices: Vec<usize> = cfg.scale_set.iter().copied().filter(|&s| s != size).collect();
            if !choices.is_empty() {
                size = choices[rng.gen_range(0..choices.len())];
            }
        }
        out.push(size);
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Augmentation {
    flip_x: bool,
    flip_y: bool,
    gain: f32,
}

impl Augmentation {
    fn draw(rng: &mut ChaCha8Rng) -> Augmentation {
        Augmentation { flip_x: rng.gen_bool(0.5), flip_y: rng.gen_bool(0.5), gain: rng.gen_range(0.8..1.2) }
    }

    fn apply(&self, img: &mut PlanarImage, anns: &mut [Annotation]) {
        let (w, h) = (img.width, img.height);
        let plane = img.plane_len();
        if self.flip_x {
            for row in img.data.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if self.flip_y {
            for c in 0..3 {
                let p = &mut img.data[c * plane..(c + 1) * plane];
                for y in 0..h / 2 {
                    let (top, bottom) = p.split_at_mut((h - 1 - y) * w);
                    top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
                }
            }
        }
        if self.gain != 1.0 {
            img.data.iter_mut().for_each(|v| *v = (*v * self.gain).clamp(0.0, 1.0));
        }
        for a in anns {
            let b = a.bbox;
            a.bbox = CenterBox {
                x: if self.flip_x { 1.0 - b.x } else { b.x },
                y: if self.flip_y { 1.0 - b.y } else { b.y },
                ..b
            };
        }
    }
}

/// Loads, optionally augments and letterboxes a batch. Work is spread over
/// the rayon pool; results keep index order.
fn prepare_batch(
    data: &dyn SampleSource,
    indices: &[usize],
    size: usize,
    augment: &[Option<Augmentation>],
) -> Result<(Tensor<f32>, Vec<Vec<Annotation>>), TrainError> {
    let prepared: Vec<(PlanarImage, Vec<Annotation>)> = indices
        .par_iter()
        .zip(augment.par_iter())
        .map(|(&i, aug)| {
            let (mut img, mut anns) = data.sample(i)?;
            if let Some(a) = aug {
                a.apply(&mut img, &mut anns);
            }
            let (canvas, lb) = letterbox(&img, size);
            Ok((canvas, lb.map_annotations(&anns)))
        })
        .collect::<Result<_, TrainError>>()?;
    let item = 3 * size * size;
    let mut x = Tensor::zeros(prepared.len(), 3, size, size);
    let mut anns = Vec::with_capacity(prepared.len());
    for (n, (img, a)) in prepared.into_iter().enumerate() {
        x.data[n * item..(n + 1) * item].copy_from_slice(&img.data);
        anns.push(a);
    }
    Ok((x, anns))
}

/// What the epoch callback sees.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean per-image loss over the epoch.
    pub loss: f64,
    pub input_size: usize,
    pub learning_rate: f64,
    /// Objects dropped by target assignment (anchor collisions).
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for checkpoints and `loss.csv`; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    pub loss: LossConfig,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochReport, &Network<f32>) -> Control>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub loss_curve: Vec<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

pub fn loss_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in curve {
        let _ = writeln!(s, "{e},{l}");
    }
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    std::fs::write(path, bytes).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

fn snapshot(net: &Network<f32>) -> Vec<Vec<f32>> {
    net.state_blocks().into_iter().map(<[f32]>::to_vec).collect()
}

fn restore(net: &mut Network<f32>, snap: &[Vec<f32>]) {
    for (dst, src) in net.state_blocks_mut().into_iter().zip(snap) {
        dst.copy_from_slice(src);
    }
}

/// Trains `net` in place. Deterministic for a given `(net, data, cfg)`.
///
/// If the loss or a gradient becomes non-finite, the weights are rolled back
/// to the end of the previous epoch, written to `last_good.ckpt` when an
/// output directory is set, and [`TrainError::Diverged`] is returned.
pub fn train(
    net: &mut Network<f32>,
    data: &dyn SampleSource,
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.clone(), source })?;
    }
    let base = net.config().input_size;
    let sizes = scale_schedule(cfg, base);
    let anchors = net.config().anchors.clone();
    let classes = net.config().num_classes();
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let warmup_steps = cfg.warmup_epochs * batches_per_epoch;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity: Vec<Vec<f32>> = Vec::new();
    let mut last_good = snapshot(net);
    let mut outcome = TrainOutcome { loss_curve: Vec::new(), checkpoints: Vec::new(), epochs_run: 0, stopped_early: false };
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let size = sizes[epoch - 1];
        if size != net.input_size() {
            info!("epoch {epoch}: input size {} -> {size}", net.input_size());
        }
        net.set_input_size(size)?;
        let grid = net.grid_size();
        order.shuffle(&mut order_rng);
        let base_lr = cfg.learning_rate_at(epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut dropped = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            if batch.is_empty() {
                warn!("epoch {epoch}: skipping empty batch");
                continue;
            }
            step += 1;
            let augs: Vec<Option<Augmentation>> =
                batch.iter().map(|_| cfg.augment.then(|| Augmentation::draw(&mut aug_rng))).collect();
            let (x, anns) = prepare_batch(data, batch, size, &augs)?;

            let result = (|| -> Result<f64, TrainError> {
                let out = net.forward(&x, Mode::Train)?;
                let preds = PredictionVolume::from_head_output(&out, anchors.len(), classes, size)?;
                let mut grads = Vec::with_capacity(preds.len());
                let mut batch_loss = 0.0;
                for (p, a) in preds.iter().zip(&anns) {
                    let t = assign_targets(a, &anchors, classes, grid)?;
                    dropped += t.dropped;
                    let l = detection_loss(p, &t, &opts.loss)?;
                    batch_loss += l.loss;
                    grads.push(l.grad);
                }
                net.zero_grad();
                net.backward(PredictionVolume::to_head_gradient(&grads, 1.0 / batch.len() as f64))?;
                let warm = if warmup_steps > 0 { (step as f64 / warmup_steps as f64).min(1.0) } else { 1.0 };
                let sgd = SgdConfig { learning_rate: base_lr * warm, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
                sgd_step(&mut net.params_mut(), &mut velocity, &sgd)?;
                if net.state_blocks().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
                    return Err(NetworkError::Numeric("non-finite weights after update".into()).into());
                }
                Ok(batch_loss)
            })();

            let failure = match result {
                Ok(l) if l.is_finite() => {
                    loss_sum += l;
                    None
                }
                Ok(l) => Some(format!("loss {l}")),
                Err(TrainError::Network(NetworkError::Numeric(m))) => Some(m),
                Err(e @ TrainError::NonFiniteGradient { .. }) => Some(e.to_string()),
                Err(e) => return Err(e),
            };
            if let Some(reason) = failure {
                net.clear_cache();
                restore(net, &last_good);
                net.set_input_size(base)?;
                let mut ckpt = None;
                if let Some(dir) = &opts.out_dir {
                    let p = dir.join(LAST_GOOD_CHECKPOINT);
                    write_file(&p, &checkpoint::to_bytes(net, (epoch - 1) as u32))?;
                    ckpt = Some(p);
                }
                return Err(TrainError::Diverged { epoch, reason, checkpoint: ckpt });
            }
            seen += batch.len();
        }

        let loss = loss_sum / seen.max(1) as f64;
        outcome.loss_curve.push((epoch, loss));
        outcome.epochs_run = epoch;
        last_good = snapshot(net);
        info!("epoch {epoch}/{}: loss {loss:.6} size {size} lr {base_lr:e}", cfg.epochs);

        let report = EpochReport { epoch, loss, input_size: size, learning_rate: base_lr, dropped };
        let control = match opts.on_epoch.as_mut() {
            Some(f) => {
                // callbacks see the network at its base size
                net.set_input_size(base)?;
                let c = f(&report, net);
                net.set_input_size(size)?;
                c
            }
            None => Control::Continue,
        };
        let last = epoch == cfg.epochs || control == Control::Stop;
        if let Some(dir) = &opts.out_dir {
            write_file(&dir.join(LOSS_CSV), loss_csv(&outcome.loss_curve).as_bytes())?;
            if epoch % cfg.checkpoint_every == 0 || last {
                net.set_input_size(base)?;
                let bytes = checkpoint::to_bytes(net, epoch as u32);
                let p = dir.join(checkpoint_name(epoch));
                write_file(&p, &bytes)?;
                outcome.checkpoints.push(p);
                if last {
                    write_file(&dir.join(FINAL_CHECKPOINT), &bytes)?;
                }
            }
        }
        if control == Control::Stop {
            outcome.stopped_early = true;
            break;
        }
    }
    net.set_input_size(base)?;
    Ok(outcome)
}
