//! Keypoint heatmap targets and peak decoding.
//!
//! Keypoints live in continuous input-pixel coordinates. The prediction grid
//! is down-sampled by an integer factor `g`; a keypoint at `(x, y)` falls in
//! cell `(floor(x/g), floor(y/g))` and the remaining fraction is the sub-cell
//! offset regressed by the offset head. Gaussians are centred on the integer
//! cell so that cell carries exactly 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2D grid of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} grid",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.cols + col] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Ground truth for one middle slice.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTarget {
    pub heatmap: Grid,
    /// Sub-cell offsets, one per keypoint, each component in `[0, 1)`.
    pub offsets: Vec<(f64, f64)>,
    /// `(row, col)` of each keypoint's cell.
    pub keypoint_cells: Vec<(usize, usize)>,
    pub g: usize,
    pub sigma: f64,
}

/// A decoded keypoint in input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Gaussian std in grid cells for an object of the given pixel radius.
pub fn sigma_for_radius(radius_px: f64, g: usize) -> f64 {
    radius_px / g as f64 / 3.0
}

/// Grid shape for an `(height, width)` image at down-sampling `g`.
pub fn grid_shape(image_shape: (usize, usize), g: usize) -> Result<(usize, usize)> {
    let (h, w) = image_shape;
    if g == 0 || h == 0 || w == 0 || h % g != 0 || w % g != 0 {
        return Err(Error::InvalidConfig(format!(
            "image {h}x{w} is not divisible by down-sampling factor {g}"
        )));
    }
    Ok((h / g, w / g))
}

/// Sub-cell offset of `center` at down-sampling `g`.
pub fn offset_target(center: (f64, f64), g: usize) -> (f64, f64) {
    let g = g as f64;
    let (x, y) = (center.0 / g, center.1 / g);
    (x - x.floor(), y - y.floor())
}

fn keypoint_cell(center: (f64, f64), g: usize) -> (usize, usize) {
    let g = g as f64;
    ((center.1 / g).floor() as usize, (center.0 / g).floor() as usize)
}

/// Renders the Gaussian target for a set of keypoint centers `(x, y)`.
///
/// Each keypoint contributes `exp(-d²/(2σ²))` where `d` is the grid distance
/// to its cell; overlapping contributions are combined with `max`.
pub fn render_heatmap(
    centers: &[(f64, f64)],
    image_shape: (usize, usize),
    g: usize,
    sigma: f64,
) -> Result<HeatmapTarget> {
    let (rows, cols) = grid_shape(image_shape, g)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = image_shape;
    for &(x, y) in centers {
        let inside = x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64;
        if !inside {
            return Err(Error::OutOfBounds {
                x,
                y,
                width: w,
                height: h,
            });
        }
    }

    let mut heatmap = Grid::zeros(rows, cols);
    let cells: Vec<_> = centers.iter().map(|&c| keypoint_cell(c, g)).collect();
    let denom = 2.0 * sigma * sigma;
    for &(kr, kc) in &cells {
        for r in 0..rows {
            let dr = r as f64 - kr as f64;
            for c in 0..cols {
                let dc = c as f64 - kc as f64;
                let v = (-(dr * dr + dc * dc) / denom).exp();
                if v > heatmap.get(r, c) {
                    heatmap.set(r, c, v);
                }
            }
        }
    }

    Ok(HeatmapTarget {
        heatmap,
        offsets: centers.iter().map(|&c| offset_target(c, g)).collect(),
        keypoint_cells: cells,
        g,
        sigma,
    })
}

/// Dense 2-channel offset target: offsets written at the keypoint cells,
/// zero elsewhere. Returns `(ox, oy, mask)`.
pub fn dense_offsets(target: &HeatmapTarget) -> (Grid, Grid, Grid) {
    let (rows, cols) = target.heatmap.shape();
    let mut ox = Grid::zeros(rows, cols);
    let mut oy = Grid::zeros(rows, cols);
    let mut mask = Grid::zeros(rows, cols);
    for (&(r, c), &(dx, dy)) in target.keypoint_cells.iter().zip(&target.offsets) {
        ox.set(r, c, dx);
        oy.set(r, c, dy);
        mask.set(r, c, 1.0);
    }
    (ox, oy, mask)
}

/// Peak decoding: 3×3 local maxima above `score_threshold`, best first,
/// at most `max_detections`, mapped back to input pixels through the offset
/// maps read at the peak cell.
pub fn decode_predictions(
    heatmap: &Grid,
    offsets: (&Grid, &Grid),
    g: usize,
    score_threshold: f64,
    max_detections: usize,
) -> Result<Vec<Detection>> {
    let (rows, cols) = heatmap.shape();
    if offsets.0.shape() != (rows, cols) || offsets.1.shape() != (rows, cols) {
        return Err(Error::ShapeMismatch(format!(
            "offset maps {:?}/{:?} vs heatmap {:?}",
            offsets.0.shape(),
            offsets.1.shape(),
            heatmap.shape()
        )));
    }
    if let Some(v) = heatmap.as_slice().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("heatmap value {v}")));
    }

    let mut peaks = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = heatmap.get(r, c);
            if v < score_threshold || v <= 0.0 {
                continue;
            }
            let is_peak = (r.saturating_sub(1)..=(r + 1).min(rows - 1)).all(|rr| {
                (c.saturating_sub(1)..=(c + 1).min(cols - 1)).all(|cc| heatmap.get(rr, cc) <= v)
            });
            if is_peak {
                peaks.push((v, r, c));
            }
        }
    }
    // Stable: equal scores keep row-major order.
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    peaks.truncate(max_detections);

    let gf = g as f64;
    let (max_x, max_y) = ((cols * g) as f64, (rows * g) as f64);
    Ok(peaks
        .into_iter()
        .map(|(v, r, c)| {
            let ox = finite_or_zero(offsets.0.get(r, c)).clamp(0.0, 1.0);
            let oy = finite_or_zero(offsets.1.get(r, c)).clamp(0.0, 1.0);
            Detection {
                x: ((c as f64 + ox) * gf).min(max_x.next_down()),
                y: ((r as f64 + oy) * gf).min(max_y.next_down()),
                score: v.clamp(0.0, 1.0),
            }
        })
        .collect())
}

fn finite_or_zero(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        0.0
    }
}
