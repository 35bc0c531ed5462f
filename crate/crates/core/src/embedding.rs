//! Text and image embedding providers.
//!
//! The network consumes two frozen embeddings: a text embedding of the
//! condition word that steers the prediction, and an image embedding of the
//! middle slice that the pooled encoder feature is pulled towards. Any
//! backend (a local CLIP port, a remote service, ...) plugs in by
//! implementing [`EmbeddingProvider`]; the bundled [`StubEmbeddings`] is a
//! deterministic seeded stand-in that needs no model weights.
//!
//! Adapter contract: both methods return unit-norm vectors of length
//! [`EmbeddingProvider::dimension`], identical for identical input, and the
//! provider must be usable from several threads once constructed.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Slice;

/// Region of the dental arch a prediction is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Left,
    Middle,
    Right,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Left, Condition::Middle, Condition::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Left => "left",
            Condition::Middle => "middle",
            Condition::Right => "right",
        }
    }

    /// The word that describes the same region after a horizontal flip.
    pub fn mirrored(self) -> Self {
        match self {
            Condition::Left => Condition::Right,
            Condition::Middle => Condition::Middle,
            Condition::Right => Condition::Left,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Condition::Left),
            "middle" => Ok(Condition::Middle),
            "right" => Ok(Condition::Right),
            other => Err(Error::UnknownCondition(other.to_string())),
        }
    }
}

/// Source of frozen text and image embeddings.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    /// Embeds a condition word. Words outside the left/middle/right
    /// vocabulary are rejected.
    fn embed_text(&self, word: &str) -> Result<Vec<f32>>;

    fn embed_image(&self, slice: &Slice) -> Result<Vec<f32>>;
}

/// Provider selection, as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub provider: String,
    pub dim: usize,
    pub seed: u64,
    /// Optional prompt such as `"a photo of the {} side"`; `{}` is replaced by the word.
    pub prompt_template: Option<String>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: "stub".into(),
            dim: 512,
            seed: StubEmbeddings::DEFAULT_SEED,
            prompt_template: None,
        }
    }
}

/// Builds the provider named in `cfg`.
pub fn build_provider(cfg: &EmbeddingConfig) -> Result<Box<dyn EmbeddingProvider>> {
    match cfg.provider.as_str() {
        "stub" => Ok(Box::new(
            StubEmbeddings::new(cfg.dim, cfg.seed)?.with_template(cfg.prompt_template.clone()),
        )),
        other => Err(Error::InvalidConfig(format!(
            "unknown embedding provider {other:?} (available: stub)"
        ))),
    }
}

/// Side length of the pooled thumbnail the stub image embedding projects.
const THUMB: usize = 8;

/// Seeded pseudo-random embeddings.
///
/// Text: one fixed Gaussian direction per (prompted) word. Image: a fixed
/// Gaussian projection of an 8×8 area-pooled thumbnail plus a bias term.
#[derive(Debug, Clone)]
pub struct StubEmbeddings {
    dim: usize,
    seed: u64,
    template: Option<String>,
    projection: Vec<f64>,
}

impl StubEmbeddings {
    pub const DEFAULT_SEED: u64 = 0x5eed_c11b;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..dim * (THUMB * THUMB + 1))
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self {
            dim,
            seed,
            template: None,
            projection,
        })
    }

    pub fn with_template(mut self, template: Option<String>) -> Self {
        self.template = template;
        self
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn unit(v: Vec<f64>) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::NonFinite(format!("embedding norm {norm}")));
    }
    Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
}

/// Area-averages a slice down to `THUMB × THUMB` cells.
fn thumbnail(slice: &Slice) -> Vec<f64> {
    let (h, w) = (slice.height(), slice.width());
    let mut sums = vec![0.0f64; THUMB * THUMB];
    let mut counts = vec![0usize; THUMB * THUMB];
    for r in 0..h {
        let tr = r * THUMB / h;
        for c in 0..w {
            let tc = c * THUMB / w;
            sums[tr * THUMB + tc] += slice.get(r, c) as f64;
            counts[tr * THUMB + tc] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect()
}

impl EmbeddingProvider for StubEmbeddings {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, word: &str) -> Result<Vec<f32>> {
        let word: Condition = word.parse()?;
        let prompt = match &self.template {
            Some(t) => t.replace("{}", word.as_str()),
            None => word.as_str().to_string(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(prompt.as_bytes()));
        unit((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    fn embed_image(&self, slice: &Slice) -> Result<Vec<f32>> {
        if slice.pixels().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image embedding input".into()));
        }
        let mut feat = thumbnail(slice);
        feat.push(1.0);
        let n = feat.len();
        unit(
            (0..self.dim)
                .map(|d| {
                    let row = &self.projection[d * n..(d + 1) * n];
                    row.iter().zip(&feat).map(|(a, b)| a * b).sum()
                })
                .collect(),
        )
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}
