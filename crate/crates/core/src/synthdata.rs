//! Procedural CBCT-like phantoms and slice-triplet extraction.
//!
//! Every axial slice shows a U-shaped dental arch: a band of alveolar bone
//! carrying a ring of bright tooth disks at fixed slots. A slot can be
//!
//! * a **target gap**: the tooth is missing and a dim bone ridge marks the
//!   planned implant axis, a straight line `(x0, y0) + (s1, s2)·(z - z_ref)`
//!   that moves across slices with the implant slope;
//! * a **sparse-teeth confuser**: the tooth is missing and the slice at
//!   `z_ref` looks like a gap, but the neighbouring teeth drift together
//!   quickly with depth, closing the space within a few slices;
//! * an **existing implant**: the crown slices look like a gap, but a bright
//!   metal disk appears in the deeper (root-side) slices.
//!
//! Slots are numbered left to right in image coordinates; the leftmost third
//! is the `left` region, the rightmost third `right`, the rest `middle`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::Condition;
use crate::error::{Error, Result};
use crate::geometry::{combined_slope, CenterPoint3D};
use crate::heatmap::{render_heatmap, HeatmapTarget};
use crate::manifest::{Manifest, ManifestImplant, ManifestPatient, ManifestTriplet, Split, MANIFEST_VERSION};
use crate::volume::{Slice, Volume};

/// Default triplet sampling interval.
pub const DEFAULT_K: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSpec {
    pub slot: usize,
    pub s1: f64,
    pub s2: f64,
}

/// Everything needed to render one patient volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub teeth: usize,
    pub gaps: Vec<GapSpec>,
    pub sparse_slot: Option<usize>,
    pub existing_implant_slot: Option<usize>,
    /// Std of additive Gaussian noise.
    pub noise: f64,
    /// Reference depth where the implant line passes through the slot centre.
    pub z_ref: usize,
    /// Inclusive crown slice range where predictions are made.
    pub crown: (usize, usize),
    pub root_depth: usize,
    /// Allowed range of `|s1| + |s2|`.
    pub slope_range: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            depth: 28,
            height: 64,
            width: 64,
            teeth: 10,
            gaps: vec![GapSpec {
                slot: 1,
                s1: 0.0,
                s2: 0.0,
            }],
            sparse_slot: None,
            existing_implant_slot: None,
            noise: 0.03,
            z_ref: 14,
            crown: (11, 17),
            root_depth: 27,
            slope_range: (0.0, 1.25),
            seed: 0,
        }
    }
}

/// Region label of a slot.
pub fn slot_region(slot: usize, teeth: usize) -> Condition {
    let side = teeth / 3;
    if slot < side {
        Condition::Left
    } else if slot >= teeth - side {
        Condition::Right
    } else {
        Condition::Middle
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth == 0 || self.height < 16 || self.width < 16 {
            return bad(format!(
                "volume {}x{}x{} is too small",
                self.depth, self.height, self.width
            ));
        }
        if self.teeth < 6 {
            return bad(format!("need at least 6 tooth slots, got {}", self.teeth));
        }
        if self.gaps.is_empty() {
            return bad("phantom needs at least one target gap".into());
        }
        let (lo, hi) = self.crown;
        if lo > hi || hi >= self.depth || self.z_ref >= self.depth || self.root_depth >= self.depth {
            return bad(format!(
                "crown range {:?}, z_ref {} or root depth {} outside depth {}",
                self.crown, self.z_ref, self.root_depth, self.depth
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise level {}", self.noise));
        }
        let mut used: Vec<usize> = Vec::new();
        let slots = self
            .gaps
            .iter()
            .map(|g| g.slot)
            .chain(self.sparse_slot)
            .chain(self.existing_implant_slot);
        for s in slots {
            if s >= self.teeth {
                return bad(format!("slot {s} outside {} teeth", self.teeth));
            }
            if used.iter().any(|&u| u.abs_diff(s) < 2) {
                return Err(Error::InvalidConfig(format!(
                    "slot {s} overlaps another gap (gaps must be at least two slots apart)"
                )));
            }
            used.push(s);
        }
        for g in &self.gaps {
            let tau = combined_slope(g.s1, g.s2);
            if !(tau >= self.slope_range.0 && tau <= self.slope_range.1) {
                return bad(format!(
                    "implant slope {tau} outside range {:?}",
                    self.slope_range
                ));
            }
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.width.min(self.height) as f64 / 64.0
    }
}

/// Ground truth for one target implant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplantAnnotation {
    pub condition: Condition,
    pub slot: usize,
    pub s1: f64,
    pub s2: f64,
    pub tau: f64,
    /// Implant position at every slice `z = 0..depth`.
    pub centerline: Vec<CenterPoint3D>,
    pub crown: (usize, usize),
    pub z_ref: usize,
    pub z_root: usize,
}

impl ImplantAnnotation {
    pub fn position_at(&self, z: usize) -> Option<(f64, f64)> {
        self.centerline.get(z).map(|p| (p.x, p.y))
    }
}

struct Arch {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Arch {
    fn point(&self, angle: f64) -> (f64, f64) {
        (self.cx + self.rx * angle.cos(), self.cy - self.ry * angle.sin())
    }

    /// Distance from `(x, y)` to the upper half of the arch ellipse,
    /// measured along the ray from the centre.
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        if dy > 0.0 {
            // below the centre line: distance to the nearer arch end
            return (dx.abs() - self.rx).hypot(dy);
        }
        let r = ((dx / self.rx).powi(2) + (dy / self.ry).powi(2)).sqrt();
        if r == 0.0 {
            return self.rx.min(self.ry);
        }
        dx.hypot(dy) * (1.0 - 1.0 / r).abs()
    }
}

fn slot_angle(slot: usize, teeth: usize) -> f64 {
    let margin = 12f64.to_radians();
    let span = std::f64::consts::PI - 2.0 * margin;
    std::f64::consts::PI - margin - span * slot as f64 / (teeth - 1) as f64
}

/// Anti-aliased disk coverage.
fn disk(d: f64, r: f64) -> f64 {
    (r - d + 0.5).clamp(0.0, 1.0)
}

struct ToothState {
    pos: (f64, f64),
    radius: f64,
    drift: (f64, f64),
    intensity: f64,
}

/// Renders a phantom volume and its implant annotations.
pub fn generate_volume(spec: &PhantomSpec) -> Result<(Volume, Vec<ImplantAnnotation>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sc = spec.scale();
    let (w, h) = (spec.width as f64, spec.height as f64);
    let arch = Arch {
        cx: w / 2.0 + rng.random_range(-1.5..1.5) * sc,
        cy: 0.70 * h + rng.random_range(-1.0..1.0) * sc,
        rx: 0.36 * w * rng.random_range(0.95..1.05),
        ry: 0.45 * h * rng.random_range(0.95..1.05),
    };
    let spacing = {
        let a = arch.point(slot_angle(0, spec.teeth));
        let b = arch.point(slot_angle(1, spec.teeth));
        (a.0 - b.0).hypot(a.1 - b.1)
    };

    let teeth: Vec<ToothState> = (0..spec.teeth)
        .map(|slot| ToothState {
            pos: arch.point(slot_angle(slot, spec.teeth)),
            radius: 3.0 * sc * rng.random_range(0.9..1.1),
            drift: (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06)),
            intensity: rng.random_range(0.75..0.95),
        })
        .collect();

    let is_gap = |s: usize| spec.gaps.iter().any(|g| g.slot == s);
    let missing = |s: usize| is_gap(s) || spec.sparse_slot == Some(s) || spec.existing_implant_slot == Some(s);

    // Sparse region: neighbours close in over ~k slices below z_ref.
    let sparse_rate = 0.55 * spacing / DEFAULT_K as f64;
    let ridge_r = 2.4 * sc;
    let ridge_level = 0.55;
    let implant_r = 2.2 * sc;

    let annotations: Vec<ImplantAnnotation> = spec
        .gaps
        .iter()
        .map(|g| {
            let (x0, y0) = teeth[g.slot].pos;
            let centerline = (0..spec.depth)
                .map(|z| {
                    let dz = z as f64 - spec.z_ref as f64;
                    CenterPoint3D::new(x0 + g.s1 * dz, y0 + g.s2 * dz, z as f64)
                })
                .collect();
            ImplantAnnotation {
                condition: slot_region(g.slot, spec.teeth),
                slot: g.slot,
                s1: g.s1,
                s2: g.s2,
                tau: combined_slope(g.s1, g.s2),
                centerline,
                crown: spec.crown,
                z_ref: spec.z_ref,
                z_root: spec.root_depth,
            }
        })
        .collect();
    for a in &annotations {
        for z in spec.crown.0..=spec.crown.1 {
            let (x, y) = a.position_at(z).expect("crown inside depth");
            if !(x >= 0.0 && y >= 0.0 && x < w && y < h) {
                return Err(Error::InvalidConfig(format!(
                    "implant at slot {} leaves the image at slice {z}",
                    a.slot
                )));
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("positive std");
    let mut slices = Vec::with_capacity(spec.depth);
    for z in 0..spec.depth {
        let dz = z as f64 - spec.z_ref as f64;
        let depth_frac = z as f64 / spec.depth as f64;

        // tooth centres for this slice
        let mut centres: Vec<Option<((f64, f64), f64, f64)>> = teeth
            .iter()
            .enumerate()
            .map(|(s, t)| {
                if missing(s) {
                    None
                } else {
                    let p = (t.pos.0 + t.drift.0 * dz, t.pos.1 + t.drift.1 * dz);
                    Some((p, t.radius * (1.1 - 0.25 * depth_frac), t.intensity))
                }
            })
            .collect();
        if let Some(q) = spec.sparse_slot {
            let shift = (sparse_rate * dz).clamp(-0.6 * spacing, 0.6 * spacing);
            let target = teeth[q].pos;
            for n in [q.wrapping_sub(1), q + 1] {
                if let Some(Some((p, _, _))) = centres.get_mut(n) {
                    let (vx, vy) = (target.0 - p.0, target.1 - p.1);
                    let len = vx.hypot(vy).max(1e-9);
                    p.0 += vx / len * shift;
                    p.1 += vy / len * shift;
                }
            }
        }

        // ridge markers: true gaps follow the implant line, confusers sit still
        let ridges: Vec<((f64, f64), (f64, f64))> = annotations
            .iter()
            .map(|a| (a.position_at(z).expect("z inside depth"), (a.s1, a.s2)))
            .chain(
                spec.sparse_slot
                    .into_iter()
                    .chain(spec.existing_implant_slot)
                    .map(|s| (teeth[s].pos, (0.0, 0.0))),
            )
            .collect();

        let metal = spec
            .existing_implant_slot
            .filter(|_| z >= spec.z_ref + 4)
            .map(|s| teeth[s].pos);

        let mut px = vec![0f32; spec.height * spec.width];
        for r in 0..spec.height {
            for c in 0..spec.width {
                let (x, y) = (c as f64, r as f64);
                let mut v: f64 = 0.0;
                // soft tissue
                let u = (x - arch.cx) / (arch.rx + 8.0 * sc);
                let vv = (y - arch.cy + 0.1 * h) / (arch.ry + 12.0 * sc);
                if u * u + vv * vv < 1.0 {
                    v = 0.10;
                }
                // alveolar bone band
                let band = arch.distance(x, y);
                v = v.max(0.28 * (4.5 * sc - band + 0.5).clamp(0.0, 1.0));
                // ridges
                // a tilted axis smears across the slice thickness
                for &(p, (s1, s2)) in &ridges {
                    let mut acc = 0.0;
                    for j in 0..5 {
                        let off = (j as f64 - 2.0) / 4.0;
                        acc += disk((x - p.0 - s1 * off).hypot(y - p.1 - s2 * off), ridge_r);
                    }
                    v = v.max(ridge_level * acc / 5.0);
                }
                // teeth
                for (p, rad, inten) in centres.iter().flatten() {
                    v = v.max(inten * disk((x - p.0).hypot(y - p.1), *rad));
                }
                if let Some(m) = metal {
                    v = v.max(disk((x - m.0).hypot(y - m.1), implant_r));
                }
                if spec.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                px[r * spec.width + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
        slices.push(Slice::from_vec(spec.height, spec.width, px)?);
    }
    Ok((Volume::new(slices)?, annotations))
}

/// Input triplet centred on slice `t`, with the middle-slice target.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTriplet {
    /// `(t - k, t, t + k)`.
    pub slices: [Slice; 3],
    pub t: usize,
    pub k: usize,
    pub patient: String,
    pub condition: Condition,
    /// Implant positions on the middle slice.
    pub targets: Vec<(f64, f64)>,
    /// Slope of each target implant.
    pub taus: Vec<f64>,
    pub heatmap: HeatmapTarget,
}

/// Heatmap rendering parameters shared by dataset and model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetParams {
    pub g: usize,
    pub sigma: f64,
}

impl Default for TargetParams {
    fn default() -> Self {
        // implant radius ≈ 6 px at 64 px resolution
        Self {
            g: 4,
            sigma: crate::heatmap::sigma_for_radius(6.0, 4),
        }
    }
}

impl SliceTriplet {
    pub fn new(
        slices: [Slice; 3],
        t: usize,
        k: usize,
        patient: String,
        condition: Condition,
        targets: Vec<(f64, f64)>,
        taus: Vec<f64>,
        params: TargetParams,
    ) -> Result<Self> {
        let shape = slices[1].shape();
        if slices.iter().any(|s| s.shape() != shape) {
            return Err(Error::ShapeMismatch("triplet slices differ in shape".into()));
        }
        if targets.len() != taus.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} targets with {} slopes",
                targets.len(),
                taus.len()
            )));
        }
        let heatmap = render_heatmap(&targets, shape, params.g, params.sigma)?;
        Ok(Self {
            slices,
            t,
            k,
            patient,
            condition,
            targets,
            taus,
            heatmap,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.slices[1].shape()
    }
}

/// Builds the `(t-k, t, t+k)` triplet for the given implants (all sharing
/// one condition word).
pub fn extract_triplet(
    volume: &Volume,
    annotations: &[&ImplantAnnotation],
    patient: &str,
    t: usize,
    k: usize,
    params: TargetParams,
) -> Result<SliceTriplet> {
    let first = annotations
        .first()
        .ok_or_else(|| Error::InvalidData("triplet needs at least one implant".into()))?;
    if t < k || t + k >= volume.depth() {
        return Err(Error::InvalidData(format!(
            "triplet ({}, {t}, {}) outside volume depth {}",
            t as isize - k as isize,
            t + k,
            volume.depth()
        )));
    }
    if annotations.iter().any(|a| a.condition != first.condition) {
        return Err(Error::InvalidData("triplet implants disagree on condition".into()));
    }
    if annotations.iter().any(|a| t < a.crown.0 || t > a.crown.1) {
        return Err(Error::InvalidData(format!(
            "slice {t} outside crown range {:?}",
            first.crown
        )));
    }
    let slice = |z: usize| volume.slice(z).cloned().expect("checked depth");
    let targets = annotations
        .iter()
        .map(|a| a.position_at(t).expect("checked depth"))
        .collect();
    SliceTriplet::new(
        [slice(t - k), slice(t), slice(t + k)],
        t,
        k,
        patient.to_string(),
        first.condition,
        targets,
        annotations.iter().map(|a| a.tau).collect(),
        params,
    )
}

/// Every crown-slice triplet of a patient, one condition word at a time.
pub fn patient_triplets(
    volume: &Volume,
    annotations: &[ImplantAnnotation],
    patient: &str,
    k: usize,
    params: TargetParams,
) -> Result<Vec<SliceTriplet>> {
    let mut out = Vec::new();
    for cond in Condition::ALL {
        let group: Vec<&ImplantAnnotation> = annotations.iter().filter(|a| a.condition == cond).collect();
        let Some(first) = group.first() else { continue };
        for t in first.crown.0..=first.crown.1 {
            out.push(extract_triplet(volume, &group, patient, t, k, params)?);
        }
    }
    Ok(out)
}

/// Distribution implant slopes are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SlopeProfile {
    /// Mostly small slopes with a heavy tail: 80% of τ in [0.05, 0.4),
    /// the rest in [0.4, 1.2].
    HeavyTail,
    Uniform { min: f64, max: f64 },
    Constant { tau: f64 },
}

impl SlopeProfile {
    pub fn sample_tau<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            SlopeProfile::HeavyTail => {
                if rng.random_bool(0.8) {
                    rng.random_range(0.05..0.4)
                } else {
                    rng.random_range(0.4..=1.2)
                }
            }
            SlopeProfile::Uniform { min, max } => {
                if max > min {
                    rng.random_range(min..=max)
                } else {
                    min
                }
            }
            SlopeProfile::Constant { tau } => tau,
        }
    }

    /// Splits τ into signed `(s1, s2)` with `|s1| + |s2| = τ`.
    pub fn sample_slopes<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let tau = self.sample_tau(rng);
        let u: f64 = rng.random_range(0.0..=1.0);
        let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let sy = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let s1 = sx * tau * u;
        (s1, sy * (tau - s1.abs()))
    }

    pub fn max_tau(&self) -> f64 {
        match *self {
            SlopeProfile::HeavyTail => 1.2,
            SlopeProfile::Uniform { max, .. } => max,
            SlopeProfile::Constant { tau } => tau,
        }
    }
}

/// How patients of a generated dataset are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub patients: usize,
    /// Fractions for train / val / test; must sum to 1.
    pub split_ratios: Vec<f64>,
    pub seed: u64,
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub teeth: usize,
    pub noise: f64,
    pub slope_profile: SlopeProfile,
    /// Probability that a patient has a left and a right target gap.
    pub two_gap_fraction: f64,
    pub sparse_fraction: f64,
    pub existing_implant_fraction: f64,
    /// Forces every validation/test patient to have the left + right gap pair.
    pub two_gap_eval: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            patients: 30,
            split_ratios: vec![0.8, 0.2],
            seed: 7,
            k: DEFAULT_K,
            height: 64,
            width: 64,
            depth: 28,
            teeth: 10,
            noise: 0.03,
            slope_profile: SlopeProfile::HeavyTail,
            two_gap_fraction: 0.5,
            sparse_fraction: 0.5,
            existing_implant_fraction: 0.5,
            two_gap_eval: false,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.is_empty()
            || self.split_ratios.len() > 3
            || self.split_ratios.iter().any(|r| !(*r >= 0.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidConfig(format!(
                "split ratios {:?} must be 1-3 non-negative values summing to 1",
                self.split_ratios
            )));
        }
        if self.patients == 0 {
            return Err(Error::InvalidConfig("dataset needs at least one patient".into()));
        }
        for p in [self.two_gap_fraction, self.sparse_fraction, self.existing_implant_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("probability {p} outside [0, 1]")));
            }
        }
        let layout = self.layout()?;
        if layout.crown.0 < self.k || layout.crown.1 + self.k >= self.depth {
            return Err(Error::InvalidConfig(format!(
                "depth {} cannot hold crown range {:?} with k = {}",
                self.depth, layout.crown, self.k
            )));
        }
        Ok(())
    }

    fn layout(&self) -> Result<Layout> {
        if self.depth < 8 {
            return Err(Error::InvalidConfig(format!("depth {} too small", self.depth)));
        }
        let z_ref = self.depth / 2;
        Ok(Layout {
            z_ref,
            crown: (z_ref - 3, z_ref + 3),
            root: self.depth - 1,
        })
    }

    /// Patient count per split (largest-remainder rounding).
    pub fn split_counts(&self) -> Vec<usize> {
        let n = self.patients as f64;
        let mut counts: Vec<usize> = self.split_ratios.iter().map(|r| (r * n).floor() as usize).collect();
        let mut rem: Vec<(usize, f64)> = self
            .split_ratios
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r * n - (r * n).floor()))
            .collect();
        rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut left = self.patients - counts.iter().sum::<usize>();
        for (i, _) in rem {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

struct Layout {
    z_ref: usize,
    crown: (usize, usize),
    root: usize,
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws the phantom spec of patient `index`.
pub fn patient_spec(cfg: &DatasetConfig, index: usize, two_gap: bool) -> Result<PhantomSpec> {
    let layout = cfg.layout()?;
    let seed = derive_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.teeth;
    let side = n / 3;
    let region_slots = |c: Condition| -> Vec<usize> { (0..n).filter(|&s| slot_region(s, n) == c).collect() };

    let mut gap_slots = Vec::new();
    if two_gap {
        let l = region_slots(Condition::Left);
        let r = region_slots(Condition::Right);
        gap_slots.push(l[rng.random_range(0..l.len())]);
        gap_slots.push(r[rng.random_range(0..r.len())]);
    } else {
        let cond = Condition::ALL[rng.random_range(0..3)];
        let s = region_slots(cond);
        // keep the slot off the arch ends so implant lines stay in frame
        let s: Vec<usize> = s.into_iter().filter(|&x| side == 0 || (x > 0 && x < n - 1)).collect();
        gap_slots.push(s[rng.random_range(0..s.len())]);
    }
    let gaps = gap_slots
        .iter()
        .map(|&slot| {
            let (s1, s2) = cfg.slope_profile.sample_slopes(&mut rng);
            GapSpec { slot, s1, s2 }
        })
        .collect::<Vec<_>>();

    let mut taken: Vec<usize> = gap_slots.clone();
    let pick_free = |rng: &mut ChaCha8Rng, taken: &mut Vec<usize>| -> Option<usize> {
        let free: Vec<usize> = (1..n - 1).filter(|&s| taken.iter().all(|&t| t.abs_diff(s) >= 2)).collect();
        if free.is_empty() {
            return None;
        }
        let s = free[rng.random_range(0..free.len())];
        taken.push(s);
        Some(s)
    };
    let sparse_slot = if rng.random_bool(cfg.sparse_fraction) {
        pick_free(&mut rng, &mut taken)
    } else {
        None
    };
    let existing_implant_slot = if rng.random_bool(cfg.existing_implant_fraction) {
        pick_free(&mut rng, &mut taken)
    } else {
        None
    };

    Ok(PhantomSpec {
        depth: cfg.depth,
        height: cfg.height,
        width: cfg.width,
        teeth: n,
        gaps,
        sparse_slot,
        existing_implant_slot,
        noise: cfg.noise,
        z_ref: layout.z_ref,
        crown: layout.crown,
        root_depth: layout.root,
        slope_range: (0.0, cfg.slope_profile.max_tau().max(0.0) + 1e-9),
        seed: rng.random(),
    })
}

/// One generated patient kept in memory.
#[derive(Debug, Clone)]
pub struct GeneratedPatient {
    pub id: String,
    pub split: Split,
    pub spec: PhantomSpec,
    pub volume: Volume,
    pub annotations: Vec<ImplantAnnotation>,
}

/// Generates every patient of a dataset in memory, with split assignment.
pub fn generate_patients(cfg: &DatasetConfig) -> Result<Vec<GeneratedPatient>> {
    cfg.validate()?;
    let counts = cfg.split_counts();
    let mut order: Vec<usize> = (0..cfg.patients).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut split_of = vec![Split::Train; cfg.patients];
    let mut cursor = 0;
    for (si, &c) in counts.iter().enumerate() {
        for &p in &order[cursor..cursor + c] {
            split_of[p] = Split::ALL[si];
        }
        cursor += c;
    }

    let mut out = Vec::with_capacity(cfg.patients);
    for i in 0..cfg.patients {
        let split = split_of[i];
        let mut coin = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0xa5a5, i as u64));
        let two_gap = if cfg.two_gap_eval && split != Split::Train {
            true
        } else {
            coin.random_bool(cfg.two_gap_fraction)
        };
        let spec = patient_spec(cfg, i, two_gap)?;
        let (volume, annotations) = generate_volume(&spec)?;
        out.push(GeneratedPatient {
            id: format!("p{i:03}"),
            split,
            spec,
            volume,
            annotations,
        });
    }
    Ok(out)
}

/// Triplets of all patients in `split`, in patient order.
pub fn split_triplets(patients: &[GeneratedPatient], split: Split, k: usize, params: TargetParams) -> Result<Vec<SliceTriplet>> {
    let mut out = Vec::new();
    for p in patients.iter().filter(|p| p.split == split) {
        out.extend(patient_triplets(&p.volume, &p.annotations, &p.id, k, params)?);
    }
    Ok(out)
}

/// Generates a dataset and writes slices plus `manifest.json` under `out`.
pub fn build_dataset(out: &Path, cfg: &DatasetConfig) -> Result<Manifest> {
    let patients = generate_patients(cfg)?;
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        height: cfg.height,
        width: cfg.width,
        depth: cfg.depth,
        k: cfg.k,
        seed: cfg.seed,
        patients: Vec::new(),
        triplets: Vec::new(),
    };
    for p in &patients {
        let dir = out.join("patients").join(&p.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut slice_paths = Vec::with_capacity(p.volume.depth());
        for (z, s) in p.volume.slices().iter().enumerate() {
            let rel = format!("patients/{}/z{z:03}.pgm", p.id);
            s.save(&out.join(&rel))?;
            slice_paths.push(rel);
        }
        manifest.patients.push(ManifestPatient {
            id: p.id.clone(),
            split: p.split,
            slice_paths,
            implants: p.annotations.iter().map(ManifestImplant::from).collect(),
        });
        for cond in Condition::ALL {
            let group: Vec<&ImplantAnnotation> = p.annotations.iter().filter(|a| a.condition == cond).collect();
            let Some(first) = group.first() else { continue };
            for t in first.crown.0..=first.crown.1 {
                manifest.triplets.push(ManifestTriplet {
                    patient: p.id.clone(),
                    split: p.split,
                    t,
                    k: cfg.k,
                    condition: cond,
                    targets: group.iter().map(|a| a.position_at(t).expect("crown")).collect(),
                    taus: group.iter().map(|a| a.tau).collect(),
                });
            }
        }
    }
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
