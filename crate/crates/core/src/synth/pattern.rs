use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::rng::{self, Stream};

/// Maximum rejection-sampling attempts per individual.
pub const MAX_ATTEMPTS: u64 = 1000;

/// One elliptical spot, in canonical unit-square coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub center_x: f64,
    pub center_y: f64,
    pub radius_major: f64,
    pub radius_minor: f64,
    pub rotation: f64,
    pub intensity: f64,
}

/// The "body" region: an axis-aligned ellipse centred in the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Silhouette {
    pub half_x: f64,
    pub half_y: f64,
}

impl Silhouette {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - 0.5) / self.half_x;
        let dy = (y - 0.5) / self.half_y;
        dx * dx + dy * dy <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.half_x * self.half_y
    }
}

impl Spot {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.center_x;
        let dy = y - self.center_y;
        let u = (c * dx + s * dy) / self.radius_major;
        let v = (-s * dx + c * dy) / self.radius_minor;
        u * u + v * v <= 1.0
    }
}

/// The marking that identifies one synthetic individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotPattern {
    pub individual_id: String,
    pub spots: Vec<Spot>,
    pub silhouette: Silhouette,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    /// Inclusive spot-count range; must lie within [4, 25].
    pub spot_count: (usize, usize),
    /// Inclusive radius range in canvas units; must lie within [0.02, 0.12].
    pub radius: (f64, f64),
    pub silhouette: Silhouette,
    /// Minimum Hausdorff distance between the spot centres of two patterns
    /// with equal spot counts.
    pub duplicate_threshold: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            spot_count: (5, 16),
            radius: (0.025, 0.07),
            silhouette: Silhouette {
                half_x: 0.42,
                half_y: 0.32,
            },
            duplicate_threshold: 0.05,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.spot_count;
        if lo < 4 || hi > 25 || lo > hi {
            return Err(SynthError::Config(format!(
                "generation.spot_count: range [{lo}, {hi}] must lie within [4, 25]"
            )));
        }
        let (rlo, rhi) = self.radius;
        if !(0.02..=0.12).contains(&rlo) || !(0.02..=0.12).contains(&rhi) || rlo > rhi {
            return Err(SynthError::Config(format!(
                "generation.radius: range [{rlo}, {rhi}] must lie within [0.02, 0.12]"
            )));
        }
        let s = self.silhouette;
        if !(s.half_x > 0.05 && s.half_x <= 0.5 && s.half_y > 0.05 && s.half_y <= 0.5) {
            return Err(SynthError::Config(
                "generation.silhouette: half axes must lie in (0.05, 0.5]".into(),
            ));
        }
        if !(self.duplicate_threshold >= 0.0 && self.duplicate_threshold.is_finite()) {
            return Err(SynthError::Config(
                "generation.duplicate_threshold: must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Symmetric Hausdorff distance between spot centres, or `None` when the
/// spot counts differ (such patterns are never near-duplicates).
pub fn center_distance(a: &SpotPattern, b: &SpotPattern) -> Option<f64> {
    if a.spots.len() != b.spots.len() {
        return None;
    }
    let directed = |from: &[Spot], to: &[Spot]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| (p.center_x - q.center_x).hypot(p.center_y - q.center_y))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    Some(directed(&a.spots, &b.spots).max(directed(&b.spots, &a.spots)))
}

pub fn is_near_duplicate(a: &SpotPattern, b: &SpotPattern, threshold: f64) -> bool {
    matches!(center_distance(a, b), Some(d) if d <= threshold)
}

fn draw_pattern(rng: &mut rng::Rng, id: &str, cfg: &GenerationConfig) -> SpotPattern {
    let count = rng.random_range(cfg.spot_count.0..=cfg.spot_count.1);
    let sil = cfg.silhouette;
    let mut spots = Vec::with_capacity(count);
    while spots.len() < count {
        // Keep centres well inside the body so every spot stays visible.
        let x = rng.random_range(0.5 - sil.half_x..=0.5 + sil.half_x);
        let y = rng.random_range(0.5 - sil.half_y..=0.5 + sil.half_y);
        let dx = (x - 0.5) / sil.half_x;
        let dy = (y - 0.5) / sil.half_y;
        if dx * dx + dy * dy > 0.85 * 0.85 {
            continue;
        }
        let a = rng.random_range(cfg.radius.0..=cfg.radius.1);
        let b = rng.random_range(cfg.radius.0..=cfg.radius.1);
        spots.push(Spot {
            center_x: x,
            center_y: y,
            radius_major: a.max(b),
            radius_minor: a.min(b),
            rotation: rng.random_range(0.0..std::f64::consts::PI),
            intensity: rng.random_range(0.55..=1.0),
        });
    }
    SpotPattern {
        individual_id: id.to_string(),
        spots,
        silhouette: sil,
    }
}

/// Draws the pattern for one individual, rejecting candidates that nearly
/// duplicate any pattern in `existing`. Deterministic in `seed`.
pub fn generate_individual(
    seed: u64,
    individual_id: &str,
    cfg: &GenerationConfig,
    existing: &[SpotPattern],
) -> Result<SpotPattern, SynthError> {
    cfg.validate()?;
    let mut last_collision = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng::stream(seed, Stream::Corpus, attempt);
        let candidate = draw_pattern(&mut rng, individual_id, cfg);
        match existing
            .iter()
            .find(|e| is_near_duplicate(&candidate, e, cfg.duplicate_threshold))
        {
            None => return Ok(candidate),
            Some(e) => last_collision = e.individual_id.clone(),
        }
    }
    Err(SynthError::Generation {
        individual_id: individual_id.to_string(),
        colliding: last_collision,
    })
}
