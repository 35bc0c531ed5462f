//! Training, evaluation and prediction loops.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Condition, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::eval::{self, EvalResult, Frame, PredictionRecord};
use crate::geometry::{fit_centerline, project_to_root, CenterPoint3D};
use crate::heatmap::{decode_predictions, Detection};
use crate::loss::{self, LossWeights, TauReduction};
use crate::manifest::{DatasetReader, Split};
use crate::model::{tensor_to_grid, Components, ModelConfig, TripletNet};
use crate::synthdata::{SliceTriplet, TargetParams};
use crate::volume::Slice;

/// Geometric augmentation applied identically to the three slices and the targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop: bool,
    pub scale: bool,
    /// Largest translation in pixels for the random crop.
    pub max_shift: f64,
    /// Scale factor range for the random scale.
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            crop: true,
            scale: true,
            max_shift: 4.0,
            scale_range: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: false,
            crop: false,
            scale: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs (0-based) at which the learning rate is divided.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub loss_weights: LossWeights,
    pub tau_reduction: TauReduction,
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Write `epoch_NNN.safetensors` every this many epochs (0 = never).
    pub checkpoint_every: usize,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 5e-4,
            epochs: 80,
            lr_decay_epochs: vec![40, 60],
            lr_decay_factor: 0.1,
            seed: 0,
            augment: AugmentConfig::default(),
            loss_weights: LossWeights::default(),
            tau_reduction: TauReduction::Max,
            eval_every: 1,
            checkpoint_every: 0,
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("learning-rate decay factor must be in (0, 1]");
        }
        if self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return bad("learning-rate decay epochs must be before the last epoch");
        }
        let a = &self.augment;
        if a.max_shift < 0.0 || !(a.scale_range.0 > 0.0 && a.scale_range.0 <= a.scale_range.1) {
            return bad("augmentation ranges are invalid");
        }
        let w = &self.loss_weights;
        if [w.heatmap, w.offset, w.align].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("loss weights must be finite and non-negative");
        }
        self.decode.validate()
    }

    /// Step-decayed learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        let divisor = 1.0 / self.lr_decay_factor;
        (0..n).fold(self.learning_rate, |lr, _| lr / divisor)
    }
}

/// Peak decoding used by evaluation and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Peaks below this are not decoded at all (they never reach the PR curve).
    pub min_score: f64,
    pub max_detections: usize,
    /// Operating point for precision/recall/F1 and root projection.
    pub score_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            min_score: 0.01,
            max_detections: 10,
            score_threshold: 0.3,
            iou_threshold: eval::DEFAULT_IOU_THRESHOLD,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.min_score) || !unit(self.score_threshold) || !unit(self.iou_threshold) || self.max_detections == 0 {
            return Err(Error::InvalidConfig("decode thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mean losses and optional validation metrics for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_sal: f64,
    pub loss_offset: f64,
    pub loss_align: f64,
    pub loss_total: f64,
    pub val_ap75: Option<f64>,
    pub val_f1: Option<f64>,
}

pub struct TrainOutcome {
    pub model: TripletNet,
    pub history: Vec<EpochMetrics>,
    /// Best validation AP75 seen and its epoch.
    pub best: Option<(usize, f64)>,
}

/// Where training artifacts go.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.safetensors")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("best.safetensors")
    }

    pub fn snapshot(&self) -> PathBuf {
        self.root.join("nan_snapshot.json")
    }

    fn append_metrics(&self, m: &EpochMetrics) -> Result<()> {
        let path = self.metrics();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(&path, e))
    }
}

/// Bilinear sample with zero outside the image; `(x, y)` in pixel-centre coordinates.
fn sample_bilinear(s: &Slice, x: f64, y: f64) -> f32 {
    let (h, w) = s.shape();
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let px = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            0.0
        } else {
            s.get(r as usize, c as usize) as f64
        }
    };
    let v = px(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + px(y0, x0 + 1.0) * fx * (1.0 - fy)
        + px(y0 + 1.0, x0) * (1.0 - fx) * fy
        + px(y0 + 1.0, x0 + 1.0) * fx * fy;
    v as f32
}

/// A similarity transform about the image centre followed by an optional
/// horizontal mirror: `x' = cx + s·(x - cx) + dx`, then `x' ↦ W-1-x'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub shift: (f64, f64),
    pub flip: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        scale: 1.0,
        shift: (0.0, 0.0),
        flip: false,
    };

    pub fn apply_point(&self, p: (f64, f64), shape: (usize, usize)) -> (f64, f64) {
        let (cx, cy) = ((shape.1 as f64 - 1.0) / 2.0, (shape.0 as f64 - 1.0) / 2.0);
        let x = cx + self.scale * (p.0 - cx) + self.shift.0;
        let y = cy + self.scale * (p.1 - cy) + self.shift.1;
        if self.flip {
            (shape.1 as f64 - 1.0 - x, y)
        } else {
            (x, y)
        }
    }

    pub fn apply_slice(&self, s: &Slice) -> Slice {
        let (h, w) = s.shape();
        if *self == Transform::IDENTITY {
            return s.clone();
        }
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let mut out = Slice::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let xo = if self.flip { w as f64 - 1.0 - c as f64 } else { c as f64 };
                let xi = cx + (xo - self.shift.0 - cx) / self.scale;
                let yi = cy + (r as f64 - self.shift.1 - cy) / self.scale;
                out.set(r, c, sample_bilinear(s, xi, yi));
            }
        }
        out
    }

    /// Applies the transform to a whole triplet; flips mirror the condition word.
    pub fn apply_triplet(&self, t: &SliceTriplet, params: TargetParams) -> Result<SliceTriplet> {
        let shape = t.shape();
        let targets: Vec<(f64, f64)> = t.targets.iter().map(|&p| self.apply_point(p, shape)).collect();
        let [a, b, c] = &t.slices;
        SliceTriplet::new(
            [self.apply_slice(a), self.apply_slice(b), self.apply_slice(c)],
            t.t,
            t.k,
            t.patient.clone(),
            if self.flip { t.condition.mirrored() } else { t.condition },
            targets,
            t.taus.clone(),
            params,
        )
    }
}

/// Draws a transform that keeps every target at least one cell inside the image.
pub fn sample_transform<R: Rng>(rng: &mut R, cfg: &AugmentConfig, t: &SliceTriplet, g: usize) -> Transform {
    let shape = t.shape();
    let margin = g as f64;
    let inside = |tr: &Transform| {
        t.targets.iter().all(|&p| {
            let (x, y) = tr.apply_point(p, shape);
            x >= margin && y >= margin && x < shape.1 as f64 - margin && y < shape.0 as f64 - margin
        })
    };
    // Draw every random number up front so the stream does not depend on retries.
    let flip = cfg.flip && rng.random_bool(0.5);
    let mut candidates = Vec::with_capacity(4);
    for _ in 0..4 {
        let scale = if cfg.scale && cfg.scale_range.0 < cfg.scale_range.1 {
            rng.random_range(cfg.scale_range.0..=cfg.scale_range.1)
        } else {
            1.0
        };
        let shift = if cfg.crop && cfg.max_shift > 0.0 {
            (
                rng.random_range(-cfg.max_shift..=cfg.max_shift),
                rng.random_range(-cfg.max_shift..=cfg.max_shift),
            )
        } else {
            (0.0, 0.0)
        };
        candidates.push(Transform { scale, shift, flip });
    }
    candidates
        .into_iter()
        .chain([Transform { flip, ..Transform::IDENTITY }, Transform::IDENTITY])
        .find(|tr| inside(tr))
        .unwrap_or(Transform::IDENTITY)
}

/// Tensors for one optimisation step.
struct Batch {
    x: Tensor,
    text: Tensor,
    image: Tensor,
    heatmap: Tensor,
    cells: Vec<(usize, usize, usize)>,
    offsets: Tensor,
    taus: Vec<f64>,
}

fn build_batch(
    model: &TripletNet,
    triplets: &[&SliceTriplet],
    provider: &dyn EmbeddingProvider,
    tau_reduction: TauReduction,
) -> Result<Batch> {
    let (x, text) = model.batch_inputs(triplets, provider)?;
    let d = model.config().embed_dim;
    let (oh, ow) = model.config().output_shape();
    let mut image = Vec::with_capacity(triplets.len() * d);
    let mut heat = Vec::with_capacity(triplets.len() * oh * ow);
    let mut cells = Vec::new();
    let mut offs = Vec::new();
    let mut taus = Vec::with_capacity(triplets.len());
    for (b, t) in triplets.iter().enumerate() {
        let v = provider.embed_image(&t.slices[1])?;
        if v.len() != d {
            return Err(Error::InvalidConfig(format!("image embedding has {} dims, model expects {d}", v.len())));
        }
        image.extend_from_slice(&v);
        if t.heatmap.heatmap.shape() != (oh, ow) {
            return Err(Error::ShapeMismatch(format!(
                "target grid {:?}, model output {:?}",
                t.heatmap.heatmap.shape(),
                (oh, ow)
            )));
        }
        heat.extend(t.heatmap.heatmap.as_slice().iter().map(|&v| v as f32));
        for (&(r, c), &(ox, oy)) in t.heatmap.keypoint_cells.iter().zip(&t.heatmap.offsets) {
            cells.push((b, r, c));
            offs.extend([ox as f32, oy as f32]);
        }
        taus.push(loss::sample_tau(&t.taus, tau_reduction)?);
    }
    let n = triplets.len();
    Ok(Batch {
        x,
        text,
        image: Tensor::from_vec(image, (n, d), &Device::Cpu)?,
        heatmap: Tensor::from_vec(heat, (n, 1, oh, ow), &Device::Cpu)?,
        offsets: Tensor::from_vec(offs, (cells.len(), 2), &Device::Cpu)?,
        cells,
        taus,
    })
}

/// Per-term losses of one batch, as graph tensors.
pub struct StepLosses {
    pub sal: Tensor,
    pub offset: Tensor,
    pub align: Tensor,
    pub total: Tensor,
}

fn step_losses(model: &TripletNet, batch: &Batch, weights: LossWeights) -> Result<StepLosses> {
    let comps = model.config().components;
    let out = model.forward(&batch.x, &batch.text)?;
    let per_sample = loss::focal_heatmap_loss(&out.heatmap, &batch.heatmap)?;
    let tau_hat = if comps.sal {
        // The normalisation uses the loss values only; gradients flow through L_i.
        loss::normalize_slopes(&batch.taus, &loss::to_f64_vec(&per_sample)?)?
    } else {
        vec![1.0; batch.taus.len()]
    };
    let sal = loss::sal_loss(&per_sample, &tau_hat)?;
    let offset = loss::offset_loss(&loss::gather_offsets(&out.offsets, &batch.cells)?, &batch.offsets)?;
    let align = if comps.ctg {
        loss::align_loss(&out.pooled, &batch.image)?
    } else {
        Tensor::zeros((), out.pooled.dtype(), out.pooled.device())?
    };
    let total = loss::total_loss(&sal, &offset, &align, weights)?;
    Ok(StepLosses { sal, offset, align, total })
}

#[derive(Serialize)]
struct NanSnapshot<'a> {
    epoch: usize,
    batch: usize,
    lr: f64,
    loss_sal: f64,
    loss_offset: f64,
    loss_align: f64,
    samples: Vec<(&'a str, usize, Condition)>,
    taus: &'a [f64],
    checkpoint: Option<String>,
}

/// Trains on in-memory triplets. With `run_dir`, writes the metrics log,
/// best/final checkpoints and, on a non-finite loss, a diagnostic snapshot.
pub fn train_triplets(
    train: &[SliceTriplet],
    val: &[SliceTriplet],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    provider: &dyn EmbeddingProvider,
    run_dir: Option<&RunDir>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidData("no training triplets".into()));
    }
    let model = TripletNet::new(model_cfg.clone())?;
    let params = TargetParams {
        g: model_cfg.g,
        sigma: train[0].heatmap.sigma,
    };
    let mut opt = AdamW::new(
        model.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    if let Some(dir) = run_dir {
        // A rerun starts a fresh log.
        let _ = std::fs::remove_file(dir.metrics());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let (mut s_sal, mut s_off, mut s_align, mut s_total) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented = chunk
                .iter()
                .map(|&i| {
                    let tr = sample_transform(&mut rng, &cfg.augment, &train[i], model_cfg.g);
                    tr.apply_triplet(&train[i], params)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SliceTriplet> = augmented.iter().collect();
            let batch = build_batch(&model, &refs, provider, cfg.tau_reduction)?;
            let l = step_losses(&model, &batch, cfg.loss_weights)?;
            let vals = [
                loss::scalar(&l.sal)?,
                loss::scalar(&l.offset)?,
                loss::scalar(&l.align)?,
                loss::scalar(&l.total)?,
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                let checkpoint = match run_dir {
                    Some(dir) => {
                        let p = dir.root.join("nan_weights.safetensors");
                        model.save(&p)?;
                        Some(p.display().to_string())
                    }
                    None => None,
                };
                let snap = NanSnapshot {
                    epoch,
                    batch: bi,
                    lr,
                    loss_sal: vals[0],
                    loss_offset: vals[1],
                    loss_align: vals[2],
                    samples: augmented.iter().map(|t| (t.patient.as_str(), t.t, t.condition)).collect(),
                    taus: &batch.taus,
                    checkpoint,
                };
                let text = serde_json::to_string_pretty(&snap)?;
                if let Some(dir) = run_dir {
                    std::fs::write(dir.snapshot(), &text).map_err(|e| Error::io(dir.snapshot(), e))?;
                }
                return Err(Error::NonFinite(format!(
                    "loss became non-finite at epoch {epoch}, batch {bi}: {text}"
                )));
            }
            opt.backward_step(&l.total)?;
            s_sal += vals[0];
            s_off += vals[1];
            s_align += vals[2];
            s_total += vals[3];
            batches += 1;
        }
        let n = batches as f64;
        let mut m = EpochMetrics {
            epoch,
            lr,
            loss_sal: s_sal / n,
            loss_offset: s_off / n,
            loss_align: s_align / n,
            loss_total: s_total / n,
            val_ap75: None,
            val_f1: None,
        };
        let last = epoch + 1 == cfg.epochs;
        if !val.is_empty() && cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let r = evaluate_model(&model, val, provider, &cfg.decode)?;
            m.val_ap75 = Some(r.ap75);
            m.val_f1 = Some(r.f1);
            if best.is_none_or(|(_, b)| r.ap75 > b) {
                best = Some((epoch, r.ap75));
                if let Some(dir) = run_dir {
                    model.save(&dir.best_checkpoint())?;
                }
            }
        }
        log::info!(
            "epoch {epoch}: lr {lr:.2e} total {:.4} (sal {:.4}, offset {:.4}, align {:.4}){}",
            m.loss_total,
            m.loss_sal,
            m.loss_offset,
            m.loss_align,
            m.val_ap75.map(|a| format!(" val AP75 {a:.4}")).unwrap_or_default()
        );
        if let Some(dir) = run_dir {
            dir.append_metrics(&m)?;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                model.save(&dir.root.join(format!("epoch_{:03}.safetensors", epoch + 1)))?;
            }
        }
        history.push(m);
    }
    if let Some(dir) = run_dir {
        model.save(&dir.final_checkpoint())?;
        if best.is_none() {
            model.save(&dir.best_checkpoint())?;
        }
    }
    Ok(TrainOutcome { model, history, best })
}

/// Trains from a dataset manifest (train split; val split for model selection).
pub fn train(
    manifest: &Path,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    provider: &dyn EmbeddingProvider,
    run_dir: Option<&RunDir>,
) -> Result<TrainOutcome> {
    let mut reader = DatasetReader::open(manifest)?;
    check_dataset(&reader, model_cfg)?;
    let params = TargetParams {
        g: model_cfg.g,
        ..TargetParams::default()
    };
    let k = Some(model_cfg.k);
    let train = reader.triplets(Split::Train, k, params)?;
    let val = reader.triplets(Split::Val, k, params)?;
    train_triplets(&train, &val, model_cfg, cfg, provider, run_dir)
}

fn check_dataset(reader: &DatasetReader, model_cfg: &ModelConfig) -> Result<()> {
    let m = reader.manifest();
    if (m.height, m.width) != (model_cfg.input_height, model_cfg.input_width) {
        return Err(Error::InvalidConfig(format!(
            "dataset slices are {}x{}, model expects {}x{}",
            m.height, m.width, model_cfg.input_height, model_cfg.input_width
        )));
    }
    Ok(())
}

/// Forward pass over triplets in fixed-size chunks, decoding each output.
/// `condition` overrides each triplet's own condition word.
pub fn detect(
    model: &TripletNet,
    triplets: &[SliceTriplet],
    provider: &dyn EmbeddingProvider,
    decode: &DecodeConfig,
    condition: Option<Condition>,
) -> Result<Vec<Vec<Detection>>> {
    const CHUNK: usize = 16;
    let g = model.config().g;
    let mut out = Vec::with_capacity(triplets.len());
    for chunk in triplets.chunks(CHUNK) {
        let conditioned: Vec<SliceTriplet>;
        let refs: Vec<&SliceTriplet> = match condition {
            Some(c) => {
                conditioned = chunk
                    .iter()
                    .map(|t| SliceTriplet {
                        condition: c,
                        ..t.clone()
                    })
                    .collect();
                conditioned.iter().collect()
            }
            None => chunk.iter().collect(),
        };
        let (x, text) = model.batch_inputs(&refs, provider)?;
        let o = model.forward(&x, &text)?;
        for b in 0..refs.len() {
            let heat = tensor_to_grid(&o.heatmap.get(b)?.get(0)?)?;
            let ox = tensor_to_grid(&o.offsets.get(b)?.get(0)?)?;
            let oy = tensor_to_grid(&o.offsets.get(b)?.get(1)?)?;
            out.push(decode_predictions(&heat, (&ox, &oy), g, decode.min_score, decode.max_detections)?);
        }
    }
    Ok(out)
}

/// Evaluation frames (predictions paired with ground truth) for a triplet set.
pub fn frames_for(
    model: &TripletNet,
    triplets: &[SliceTriplet],
    provider: &dyn EmbeddingProvider,
    decode: &DecodeConfig,
) -> Result<Vec<Frame>> {
    let dets = detect(model, triplets, provider, decode, None)?;
    Ok(triplets
        .iter()
        .zip(dets)
        .map(|(t, predictions)| Frame {
            patient: t.patient.clone(),
            slice: t.t,
            condition: t.condition,
            predictions,
            ground_truth: t.targets.clone(),
        })
        .collect())
}

pub fn evaluate_model(
    model: &TripletNet,
    triplets: &[SliceTriplet],
    provider: &dyn EmbeddingProvider,
    decode: &DecodeConfig,
) -> Result<EvalResult> {
    let frames = frames_for(model, triplets, provider, decode)?;
    eval::evaluate(&frames, decode.iou_threshold, decode.score_threshold)
}

/// Loads a checkpoint and evaluates it on one split of a dataset.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &Path,
    split: Split,
    provider: &dyn EmbeddingProvider,
    decode: &DecodeConfig,
) -> Result<EvalResult> {
    let model = TripletNet::load(checkpoint)?;
    let mut reader = DatasetReader::open(manifest)?;
    check_dataset(&reader, model.config())?;
    let params = TargetParams {
        g: model.config().g,
        ..TargetParams::default()
    };
    let triplets = reader.triplets(split, Some(model.config().k), params)?;
    if triplets.is_empty() {
        return Err(Error::InvalidData(format!("split {split} has no triplets")));
    }
    evaluate_model(&model, &triplets, provider, decode)
}

/// Root-level implant position from a fitted per-slice track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootProjection {
    pub patient: String,
    pub condition: Condition,
    pub z_root: f64,
    pub x: f64,
    pub y: f64,
    pub slices_used: usize,
    pub tau: f64,
}

/// Fits a centerline through the top-1 detection of each slice of every
/// `(patient, condition)` track and evaluates it at `z_root`. Detections
/// under `score_threshold` are ignored; tracks left with fewer than two
/// slices are skipped with a warning.
pub fn project_tracks(records: &[PredictionRecord], score_threshold: f64, z_root: f64) -> Result<Vec<RootProjection>> {
    let mut out = Vec::new();
    let grouped = eval::group_predictions(records);
    let mut tracks: std::collections::BTreeMap<(String, Condition), Vec<CenterPoint3D>> = Default::default();
    for ((patient, slice, cond), dets) in &grouped {
        let top = dets
            .iter()
            .filter(|d| d.score >= score_threshold)
            .max_by(|a, b| a.score.total_cmp(&b.score));
        let entry = tracks.entry((patient.clone(), *cond)).or_default();
        if let Some(d) = top {
            entry.push(CenterPoint3D::new(d.x, d.y, *slice as f64));
        }
    }
    for ((patient, condition), pts) in tracks {
        if pts.len() < 2 {
            log::warn!(
                "track {patient}/{condition} has {} accepted slices; root projection skipped",
                pts.len()
            );
            continue;
        }
        let fit = match fit_centerline(&pts) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("track {patient}/{condition}: {e}; root projection skipped");
                continue;
            }
        };
        let (x, y) = project_to_root(&fit, z_root)?;
        out.push(RootProjection {
            patient,
            condition,
            z_root,
            x,
            y,
            slices_used: pts.len(),
            tau: fit.tau,
        });
    }
    Ok(out)
}

/// Prediction rows for every triplet of `split`, under an optional condition override.
pub fn predict(
    model: &TripletNet,
    triplets: &[SliceTriplet],
    provider: &dyn EmbeddingProvider,
    decode: &DecodeConfig,
    condition: Option<Condition>,
) -> Result<Vec<PredictionRecord>> {
    let dets = detect(model, triplets, provider, decode, condition)?;
    let mut out = Vec::new();
    for (t, ds) in triplets.iter().zip(dets) {
        let cond = condition.unwrap_or(t.condition);
        out.extend(ds.into_iter().map(|d| PredictionRecord {
            patient: t.patient.clone(),
            slice: t.t,
            condition: cond,
            x: d.x,
            y: d.y,
            score: d.score,
        }));
    }
    Ok(out)
}

/// One row of the component ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub tvp: bool,
    pub ctg: bool,
    pub sal: bool,
    pub seed: u64,
    pub ap75: f64,
    pub f1: f64,
    pub within_10px: f64,
}

/// Trains and evaluates one component setting.
pub fn run_variant(
    train: &[SliceTriplet],
    val: &[SliceTriplet],
    base: &ModelConfig,
    cfg: &TrainConfig,
    components: Components,
    seed: u64,
    provider: &dyn EmbeddingProvider,
    run_dir: Option<&RunDir>,
) -> Result<(AblationRow, EvalResult)> {
    let model_cfg = ModelConfig {
        components,
        seed,
        ..base.clone()
    };
    let tcfg = TrainConfig { seed, ..cfg.clone() };
    let outcome = train_triplets(train, &[], &model_cfg, &tcfg, provider, run_dir)?;
    let r = evaluate_model(&outcome.model, val, provider, &cfg.decode)?;
    let row = AblationRow {
        label: components.label(),
        tvp: components.tvp,
        ctg: components.ctg,
        sal: components.sal,
        seed,
        ap75: r.ap75,
        f1: r.f1,
        within_10px: r.within_10px(),
    };
    Ok((row, r))
}

/// Trains and evaluates every cell of `grid` for each seed.
pub fn ablate(
    train: &[SliceTriplet],
    val: &[SliceTriplet],
    base: &ModelConfig,
    cfg: &TrainConfig,
    grid: &[Components],
    seeds: &[u64],
    provider: &dyn EmbeddingProvider,
    out_root: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len() * seeds.len());
    for &c in grid {
        for &seed in seeds {
            let dir = match out_root {
                Some(root) => Some(RunDir::new(&root.join(format!("{}_seed{seed}", c.label().replace('+', "_"))))?),
                None => None,
            };
            let (row, _) = run_variant(train, val, base, cfg, c, seed, provider, dir.as_ref())?;
            log::info!("{} seed {seed}: AP75 {:.4} F1 {:.4}", row.label, row.ap75, row.f1);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::StubEmbeddings;

    fn triplet_with_marker(x: f64, y: f64) -> SliceTriplet {
        let mut s = Slice::zeros(32, 32);
        s.set(y as usize, x as usize, 1.0);
        SliceTriplet::new(
            [s.clone(), s.clone(), s],
            5,
            2,
            "p".into(),
            Condition::Left,
            vec![(x, y)],
            vec![0.5],
            TargetParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn lr_steps_down_by_the_factor() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-4);
        assert_eq!(cfg.lr_at(39), 10.0 * cfg.lr_at(40));
        assert_eq!(cfg.lr_at(59), 10.0 * cfg.lr_at(60));
        assert_eq!(cfg.lr_at(40), cfg.lr_at(59));
    }

    #[test]
    fn decay_epoch_past_end_rejected() {
        let cfg = TrainConfig {
            epochs: 40,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flip_mirrors_condition_and_target() {
        let t = triplet_with_marker(5.0, 9.0);
        let tr = Transform {
            flip: true,
            ..Transform::IDENTITY
        };
        let a = tr.apply_triplet(&t, TargetParams::default()).unwrap();
        assert_eq!(a.condition, Condition::Right);
        assert_eq!(a.targets, vec![(26.0, 9.0)]);
        assert_eq!(a.slices[1].get(9, 26), 1.0);
    }

    #[test]
    fn shift_moves_pixels_and_targets_together() {
        let t = triplet_with_marker(10.0, 12.0);
        let tr = Transform {
            shift: (3.0, -2.0),
            ..Transform::IDENTITY
        };
        let a = tr.apply_triplet(&t, TargetParams::default()).unwrap();
        assert_eq!(a.targets, vec![(13.0, 10.0)]);
        for s in &a.slices {
            assert_eq!(s.get(10, 13), 1.0);
        }
    }

    #[test]
    fn sampled_transforms_keep_targets_inside() {
        let t = triplet_with_marker(5.0, 26.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AugmentConfig {
            max_shift: 10.0,
            ..AugmentConfig::default()
        };
        for _ in 0..200 {
            let tr = sample_transform(&mut rng, &cfg, &t, 4);
            let (x, y) = tr.apply_point(t.targets[0], t.shape());
            assert!((0.0..32.0).contains(&x) && (0.0..32.0).contains(&y));
        }
    }

    #[test]
    fn short_tracks_are_skipped() {
        let rec = |slice, x| PredictionRecord {
            patient: "p".into(),
            slice,
            condition: Condition::Left,
            x,
            y: 4.0,
            score: 0.9,
        };
        assert!(project_tracks(&[rec(3, 1.0)], 0.5, 10.0).unwrap().is_empty());
        let p = project_tracks(&[rec(3, 1.0), rec(4, 2.0)], 0.5, 10.0).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0].x - 8.0).abs() < 1e-9);
    }

    #[test]
    fn smoke_training_is_finite_and_reproducible() {
        let cfg = ModelConfig {
            input_height: 32,
            input_width: 32,
            encoder_widths: vec![4, 8, 8, 8],
            decoder_channels: 8,
            head_channels: 4,
            embed_dim: 16,
            ..ModelConfig::default()
        };
        let provider = StubEmbeddings::new(16, 1).unwrap();
        let data: Vec<SliceTriplet> = (0..4).map(|i| triplet_with_marker(8.0 + i as f64, 12.0)).collect();
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr_decay_epochs: vec![],
            ..TrainConfig::default()
        };
        let a = train_triplets(&data, &data, &cfg, &tcfg, &provider, None).unwrap();
        let b = train_triplets(&data, &data, &cfg, &tcfg, &provider, None).unwrap();
        assert!(a.history.iter().all(|m| m.loss_total.is_finite()));
        assert_eq!(a.history, b.history);
    }
}
