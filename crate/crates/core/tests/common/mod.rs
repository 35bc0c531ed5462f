//! Independent reference implementations shared by the integration tests
//! and the acceptance harness.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use nalgebra::{Matrix2, Vector2};

/// `(C, N)` channel-major feature map of one sample, as nested vectors.
pub type Feat = Vec<Vec<f64>>;

/// Nested-loop cross-attention fusion of `(C, N)` maps:
/// `concat[softmax(M2·M1ᵀ/√C)·M1 + M2, softmax(M2·M3ᵀ/√C)·M3 + M2]`.
pub fn attention_loops(m1: &Feat, m2: &Feat, m3: &Feat) -> Feat {
    let c = m2.len();
    let n = m2[0].len();
    let attend = |key: &Feat| -> Feat {
        let mut out = vec![vec![0.0; n]; c];
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += m2[ch][i] * key[ch][j];
                }
                logits[j] = dot / (c as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                for ch in 0..c {
                    out[ch][i] += exps[j] / z * key[ch][j];
                }
            }
            for ch in 0..c {
                out[ch][i] += m2[ch][i];
            }
        }
        out
    };
    let mut a = attend(m1);
    a.extend(attend(m3));
    a
}

/// `(1, C, h, w)` tensor from a `(C, h·w)` map.
pub fn feat_tensor(f: &Feat, h: usize, w: usize, dtype: DType) -> Tensor {
    let c = f.len();
    let flat: Vec<f64> = f.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (1, c, h, w), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn tensor_feat(t: &Tensor) -> Feat {
    let (_, c, h, w) = t.dims4().unwrap();
    let v: Vec<f64> = t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    (0..c).map(|ch| v[ch * h * w..(ch + 1) * h * w].to_vec()).collect()
}

/// Least-squares slopes of `x = s1·z + b1`, `y = s2·z + b2` via the 2×2
/// normal equations `[Σz² Σz; Σz n]·[s; b] = [Σzx; Σx]`.
pub fn normal_equation_slopes(pts: &[(f64, f64, f64)]) -> (f64, f64, f64, f64) {
    let n = pts.len() as f64;
    let (sz, szz) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.2, b + p.2 * p.2));
    let a = Matrix2::new(szz, sz, sz, n);
    let solve = |f: &dyn Fn(&(f64, f64, f64)) -> f64| {
        let rhs = Vector2::new(
            pts.iter().map(|p| p.2 * f(p)).sum::<f64>(),
            pts.iter().map(f).sum::<f64>(),
        );
        a.lu().solve(&rhs).expect("non-degenerate z")
    };
    let x = solve(&|p| p.0);
    let y = solve(&|p| p.1);
    (x[0], y[0], x[1], y[1])
}

/// Interpolated AP evaluated by thresholding at every distinct score and
/// taking, for every distinct recall level, the best precision at equal or
/// higher recall.
pub fn ap_bruteforce(scored: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| a.total_cmp(b));
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<_> = scored.iter().filter(|s| s.0 >= t).collect();
            let tp = kept.iter().filter(|s| s.1).count() as f64;
            (tp / num_gt as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(|a, b| a.total_cmp(b));
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let best = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

/// Central finite-difference gradient of a scalar function of a vector.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let up = f(&xp);
        xp[i] = orig - h;
        let down = f(&xp);
        xp[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    g
}

/// Max over components of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
