//! Versioned dataset manifest.
//!
//! ```json
//! {
//!   "version": 1, "height": 64, "width": 64, "depth": 28, "k": 7, "seed": 7,
//!   "patients": [{
//!     "id": "p000", "split": "train",
//!     "slice_paths": ["patients/p000/z000.pgm", "..."],
//!     "implants": [{"condition": "left", "slot": 1, "s1": 0.1, "s2": -0.2, "tau": 0.3,
//!                   "crown": [11, 17], "z_ref": 14, "z_root": 27,
//!                   "centerline": [[x, y, z], "..."]}]
//!   }],
//!   "triplets": [{"patient": "p000", "split": "train", "t": 11, "k": 7,
//!                 "condition": "left", "targets": [[x, y]], "taus": [0.3]}]
//! }
//! ```
//!
//! Slice paths are relative to the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::Condition;
use crate::error::{Error, Result};
use crate::geometry::CenterPoint3D;
use crate::synthdata::{ImplantAnnotation, SliceTriplet, TargetParams};
use crate::volume::Slice;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImplant {
    pub condition: Condition,
    pub slot: usize,
    pub s1: f64,
    pub s2: f64,
    pub tau: f64,
    pub crown: (usize, usize),
    pub z_ref: usize,
    pub z_root: usize,
    pub centerline: Vec<(f64, f64, f64)>,
}

impl From<&ImplantAnnotation> for ManifestImplant {
    fn from(a: &ImplantAnnotation) -> Self {
        Self {
            condition: a.condition,
            slot: a.slot,
            s1: a.s1,
            s2: a.s2,
            tau: a.tau,
            crown: a.crown,
            z_ref: a.z_ref,
            z_root: a.z_root,
            centerline: a.centerline.iter().map(|p| (p.x, p.y, p.z)).collect(),
        }
    }
}

impl From<&ManifestImplant> for ImplantAnnotation {
    fn from(m: &ManifestImplant) -> Self {
        Self {
            condition: m.condition,
            slot: m.slot,
            s1: m.s1,
            s2: m.s2,
            tau: m.tau,
            centerline: m.centerline.iter().map(|&(x, y, z)| CenterPoint3D::new(x, y, z)).collect(),
            crown: m.crown,
            z_ref: m.z_ref,
            z_root: m.z_root,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub id: String,
    pub split: Split,
    pub slice_paths: Vec<String>,
    pub implants: Vec<ManifestImplant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTriplet {
    pub patient: String,
    pub split: Split,
    pub t: usize,
    pub k: usize,
    pub condition: Condition,
    pub targets: Vec<(f64, f64)>,
    pub taus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub k: usize,
    pub seed: u64,
    pub patients: Vec<ManifestPatient>,
    pub triplets: Vec<ManifestTriplet>,
}

impl Manifest {
    /// Parses and validates manifest JSON.
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Structural checks: version, unique patients, slice counts, triplet
    /// ranges, patient-disjoint splits, finite geometry.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidData(m));
        if self.version != MANIFEST_VERSION {
            return bad(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            ));
        }
        if self.height == 0 || self.width == 0 || self.depth == 0 {
            return bad("manifest image dimensions must be positive".into());
        }
        let mut by_id: HashMap<&str, &ManifestPatient> = HashMap::new();
        for p in &self.patients {
            if by_id.insert(p.id.as_str(), p).is_some() {
                return bad(format!("patient {} listed twice", p.id));
            }
            if p.slice_paths.len() != self.depth {
                return bad(format!(
                    "patient {} has {} slices, expected {}",
                    p.id,
                    p.slice_paths.len(),
                    self.depth
                ));
            }
            if let Some(sp) = p.slice_paths.iter().find(|s| Path::new(s).is_absolute() || s.contains("..")) {
                return bad(format!("slice path {sp:?} must be relative to the manifest"));
            }
            for imp in &p.implants {
                let finite = [imp.s1, imp.s2, imp.tau].iter().all(|v| v.is_finite())
                    && imp.centerline.iter().all(|c| c.0.is_finite() && c.1.is_finite() && c.2.is_finite());
                if !finite {
                    return Err(Error::NonFinite(format!("implant geometry of patient {}", p.id)));
                }
            }
        }
        let mut seen_split: HashMap<&str, Split> = HashMap::new();
        let mut keys = HashSet::new();
        for t in &self.triplets {
            let Some(p) = by_id.get(t.patient.as_str()) else {
                return bad(format!("triplet references unknown patient {}", t.patient));
            };
            if p.split != t.split {
                return bad(format!("triplet split {} differs from patient {}", t.split, p.id));
            }
            if let Some(prev) = seen_split.insert(t.patient.as_str(), t.split) {
                if prev != t.split {
                    return bad(format!("patient {} appears in two splits", t.patient));
                }
            }
            if t.t < t.k || t.t + t.k >= self.depth {
                return bad(format!(
                    "triplet t={} k={} outside depth {}",
                    t.t, t.k, self.depth
                ));
            }
            if t.targets.len() != t.taus.len() || t.targets.is_empty() {
                return bad(format!("triplet {}:{} needs one slope per target", t.patient, t.t));
            }
            let in_image = t.targets.iter().all(|&(x, y)| {
                x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
            });
            if !in_image || t.taus.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!("triplet {}:{} has invalid targets or slopes", t.patient, t.t));
            }
            if !keys.insert((t.patient.as_str(), t.t, t.condition)) {
                return bad(format!("duplicate triplet {}:{}:{}", t.patient, t.t, t.condition));
            }
        }
        Ok(())
    }

    pub fn patient(&self, id: &str) -> Option<&ManifestPatient> {
        self.patients.iter().find(|p| p.id == id)
    }

    pub fn triplets_in(&self, split: Split) -> impl Iterator<Item = &ManifestTriplet> {
        self.triplets.iter().filter(move |t| t.split == split)
    }
}

/// Reads slices referenced by a manifest and assembles triplets.
pub struct DatasetReader {
    root: PathBuf,
    manifest: Manifest,
    cache: HashMap<(String, usize), Slice>,
}

impl DatasetReader {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            root,
            manifest,
            cache: HashMap::new(),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn slice(&mut self, patient: &str, z: usize) -> Result<Slice> {
        if let Some(s) = self.cache.get(&(patient.to_string(), z)) {
            return Ok(s.clone());
        }
        let p = self
            .manifest
            .patient(patient)
            .ok_or_else(|| Error::InvalidData(format!("unknown patient {patient}")))?;
        let rel = p
            .slice_paths
            .get(z)
            .ok_or_else(|| Error::InvalidData(format!("patient {patient} has no slice {z}")))?;
        let s = Slice::load(&self.root.join(rel))?;
        if s.shape() != (self.manifest.height, self.manifest.width) {
            return Err(Error::ShapeMismatch(format!(
                "slice {rel} is {:?}, manifest says {}x{}",
                s.shape(),
                self.manifest.height,
                self.manifest.width
            )));
        }
        self.cache.insert((patient.to_string(), z), s.clone());
        Ok(s)
    }

    /// Loads every triplet of `split`, optionally overriding the sampling interval.
    pub fn triplets(&mut self, split: Split, k: Option<usize>, params: TargetParams) -> Result<Vec<SliceTriplet>> {
        let wanted: Vec<ManifestTriplet> = self.manifest.triplets_in(split).cloned().collect();
        let mut out = Vec::with_capacity(wanted.len());
        for t in wanted {
            let k = k.unwrap_or(t.k);
            if t.t < k || t.t + k >= self.manifest.depth {
                return Err(Error::InvalidConfig(format!(
                    "k = {k} does not fit slice {} in depth {}",
                    t.t, self.manifest.depth
                )));
            }
            let slices = [
                self.slice(&t.patient, t.t - k)?,
                self.slice(&t.patient, t.t)?,
                self.slice(&t.patient, t.t + k)?,
            ];
            out.push(SliceTriplet::new(
                slices,
                t.t,
                k,
                t.patient.clone(),
                t.condition,
                t.targets.clone(),
                t.taus.clone(),
                params,
            )?);
        }
        Ok(out)
    }

    /// Annotations of a patient.
    pub fn annotations(&self, patient: &str) -> Vec<ImplantAnnotation> {
        self.manifest
            .patient(patient)
            .map(|p| p.implants.iter().map(ImplantAnnotation::from).collect())
            .unwrap_or_default()
    }
}
