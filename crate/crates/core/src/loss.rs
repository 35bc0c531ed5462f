//! Training criteria.
//!
//! All tensor losses work for any float dtype; the model trains in `f32`
//! while the gradient checks run the same code in `f64`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Focal loss exponent on the prediction term.
pub const FOCAL_ALPHA: i32 = 2;
/// Penalty-reduction exponent on `(1 - gt)` for background cells.
pub const FOCAL_BETA: i32 = 4;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Penalty-reduced pixel-wise focal loss, one value per sample.
///
/// `pred` holds post-sigmoid probabilities in `(0, 1)` and `gt` the Gaussian
/// target, both shaped `(batch, ...)`. Cells with `gt == 1` are positives:
///
/// ```text
/// pos: -(1 - p)^α · log(p)
/// neg: -(1 - y)^β · p^α · log(1 - p)
/// ```
///
/// Each sample's sum is divided by its number of positives (at least 1).
pub fn focal_heatmap_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt, "focal loss prediction vs target")?;
    if pred.rank() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "focal loss expects (batch, ...) tensors, got {:?}",
            pred.dims()
        )));
    }
    let dtype = pred.dtype();
    let pos = gt.eq(1.0)?.to_dtype(dtype)?;
    let neg = pos.affine(-1.0, 1.0)?;

    let one_minus_p = pred.affine(-1.0, 1.0)?;
    let pos_term = (pred.log()? * one_minus_p.powf(FOCAL_ALPHA as f64)?)?.mul(&pos)?;
    let bg_weight = gt.affine(-1.0, 1.0)?.powf(FOCAL_BETA as f64)?;
    let neg_term = ((one_minus_p.log()? * pred.powf(FOCAL_ALPHA as f64)?)? * bg_weight)?.mul(&neg)?;

    let per_sample = (pos_term + neg_term)?.flatten_from(1)?.sum(1)?;
    let num_pos = pos.flatten_from(1)?.sum(1)?.clamp(1.0, f64::MAX)?;
    Ok(per_sample.div(&num_pos)?.neg()?)
}

/// Eq-sum-preserving normalisation of per-sample slopes:
/// `tau_hat_i = tau_i · Σ L / Σ tau·L`.
///
/// Falls back to all-ones (with a warning) when `Σ tau·L == 0`.
pub fn normalize_slopes(taus: &[f64], losses: &[f64]) -> Result<Vec<f64>> {
    if taus.len() != losses.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} slopes for {} losses",
            taus.len(),
            losses.len()
        )));
    }
    if taus.is_empty() {
        return Err(Error::InvalidData("cannot normalise an empty batch of slopes".into()));
    }
    if let Some(v) = taus.iter().chain(losses).find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidData(format!(
            "slopes and losses must be finite and non-negative, got {v}"
        )));
    }
    let total: f64 = losses.iter().sum();
    let weighted: f64 = taus.iter().zip(losses).map(|(t, l)| t * l).sum();
    if weighted == 0.0 {
        log::warn!("slope-weighted loss sum is zero; using uniform slope weights");
        return Ok(vec![1.0; taus.len()]);
    }
    if taus.iter().all(|&t| t == taus[0]) {
        // τ·ΣL / (τ·ΣL) is exactly one; skip the rounding of the general path.
        return Ok(vec![1.0; taus.len()]);
    }
    let scale = total / weighted;
    Ok(taus.iter().map(|t| t * scale).collect())
}

/// `Σ tau_hat_i · L_i` over a `(batch,)` tensor of per-sample heatmap losses.
pub fn sal_loss(per_sample: &Tensor, tau_hats: &[f64]) -> Result<Tensor> {
    if per_sample.rank() != 1 || per_sample.dim(0)? != tau_hats.len() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} losses for {} weights",
            per_sample.dims(),
            tau_hats.len()
        )));
    }
    if tau_hats.is_empty() {
        return Ok(Tensor::zeros((), per_sample.dtype(), per_sample.device())?);
    }
    let w = Tensor::from_slice(tau_hats, tau_hats.len(), per_sample.device())?.to_dtype(per_sample.dtype())?;
    Ok(per_sample.mul(&w)?.sum_all()?)
}

/// Mean absolute error between offsets read at keypoint cells, both `(K, 2)`.
/// Zero keypoints give 0.
pub fn offset_loss(pred_at_peaks: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred_at_peaks, gt, "offset prediction vs target")?;
    if pred_at_peaks.elem_count() == 0 {
        return Ok(Tensor::zeros((), pred_at_peaks.dtype(), pred_at_peaks.device())?);
    }
    Ok(pred_at_peaks.sub(gt)?.abs()?.mean_all()?)
}

/// Reads a dense `(batch, 2, rows, cols)` offset map at `(batch, row, col)`
/// cells, giving `(K, 2)`.
pub fn gather_offsets(dense: &Tensor, cells: &[(usize, usize, usize)]) -> Result<Tensor> {
    let (b, c, rows, cols) = dense.dims4()?;
    if c != 2 {
        return Err(Error::ShapeMismatch(format!("offset map has {c} channels, expected 2")));
    }
    let mut idx = Vec::with_capacity(cells.len());
    for &(bi, r, col) in cells {
        if bi >= b || r >= rows || col >= cols {
            return Err(Error::ShapeMismatch(format!(
                "cell ({bi}, {r}, {col}) outside offset map {:?}",
                dense.dims()
            )));
        }
        idx.push(((bi * rows + r) * cols + col) as u32);
    }
    let flat = dense.permute((0, 2, 3, 1))?.reshape((b * rows * cols, 2))?;
    if idx.is_empty() {
        return Ok(Tensor::zeros((0, 2), dense.dtype(), dense.device())?);
    }
    let idx = Tensor::from_vec(idx, cells.len(), dense.device())?;
    Ok(flat.index_select(&idx, 0)?)
}

/// Knowledge-alignment L1: mean `|m - v|` between pooled image features and
/// frozen image embeddings, shaped `(D,)` or `(batch, D)`.
pub fn align_loss(pooled: &Tensor, image_embedding: &Tensor) -> Result<Tensor> {
    same_shape(pooled, image_embedding, "pooled feature vs image embedding")?;
    if pooled.elem_count() == 0 {
        return Err(Error::ShapeMismatch("empty embedding".into()));
    }
    Ok(pooled.sub(image_embedding)?.abs()?.mean_all()?)
}

/// Weights of the three terms of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub heatmap: f64,
    pub offset: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            heatmap: 1.0,
            offset: 1.0,
            align: 1.0,
        }
    }
}

/// `sal + offset + align` with the configured (unit by default) weights.
pub fn total_loss(sal: &Tensor, offset: &Tensor, align: &Tensor, w: LossWeights) -> Result<Tensor> {
    let sum = sal
        .affine(w.heatmap, 0.0)?
        .add(&offset.affine(w.offset, 0.0)?)?
        .add(&align.affine(w.align, 0.0)?)?;
    Ok(sum)
}

/// How one training sample's slope is derived when its slice shows several
/// target implants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauReduction {
    #[default]
    Max,
    Mean,
}

/// Reduces the slopes of the implants visible in one sample to one value.
pub fn sample_tau(taus: &[f64], mode: TauReduction) -> Result<f64> {
    if taus.is_empty() {
        return Err(Error::InvalidData("sample has no implant slopes".into()));
    }
    Ok(match mode {
        TauReduction::Max => taus.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        TauReduction::Mean => taus.iter().sum::<f64>() / taus.len() as f64,
    })
}

/// Scalar value of a 0-d tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Per-sample values of a `(batch,)` tensor as `f64`.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
