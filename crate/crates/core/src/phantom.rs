//! Synthetic paired CT-like/PET-like slice generator with ground-truth tumor
//! boxes. Cancerous slices carry a CT lesion with a co-located PET hotspot;
//! healthy slices optionally carry a single-modality decoy (a CT-only lesion
//! or a PET-only hotspot, drawn from the same distributions), so neither
//! modality alone separates the classes once the decoy rate is positive.

use std::collections::BTreeMap;
use std::f32::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Grid;

/// Slice-level class label; `Cancerous` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Cancerous,
}

impl Label {
    pub fn is_positive(self) -> bool {
        matches!(self, Label::Cancerous)
    }

    pub fn as_f32(self) -> f32 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

/// Inclusive pixel rectangle; `x` is the column axis, `y` the row axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Grow the box by `margin` pixels on every side, clamped to the image.
    pub fn dilated(&self, margin: usize, width: usize, height: usize) -> PixelBox {
        PixelBox {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width.saturating_sub(1)),
            y1: (self.y1 + margin).min(height.saturating_sub(1)),
        }
    }
}

/// Generator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub num_cancerous: usize,
    pub num_healthy: usize,
    /// Square slice side in pixels.
    pub image_size: usize,
    /// Lesion radius bounds in pixels.
    pub lesion_radius_range: (f32, f32),
    /// Peak added PET intensity of a hotspot, in (0, 1].
    pub hotspot_intensity: f32,
    /// Probability that a healthy slice carries a single-modality decoy.
    pub decoy_rate: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            num_cancerous: 0,
            num_healthy: 0,
            image_size: 128,
            lesion_radius_range: (6.0, 14.0),
            hotspot_intensity: 0.9,
            decoy_rate: 0.4,
            noise_sigma: 0.02,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image_size must be >= 32, got {}",
                self.image_size
            )));
        }
        let (lo, hi) = self.lesion_radius_range;
        if !(lo > 0.0 && lo <= hi && hi < self.image_size as f32 / 4.0) {
            return Err(Error::Config(format!(
                "lesion_radius_range ({lo}, {hi}) must be positive and below image_size/4"
            )));
        }
        if !(self.hotspot_intensity > 0.0 && self.hotspot_intensity <= 1.0) {
            return Err(Error::Config(format!(
                "hotspot_intensity {} must lie in (0, 1]",
                self.hotspot_intensity
            )));
        }
        if !(0.0..=1.0).contains(&self.decoy_rate) {
            return Err(Error::Config(format!(
                "decoy_rate {} must lie in [0, 1]",
                self.decoy_rate
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma {} must be finite and non-negative",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// A co-registered CT/PET slice pair: the unit of supervision.
#[derive(Debug, Clone)]
pub struct SlicePair {
    pub ct: Grid,
    pub pet: Grid,
    pub label: Label,
    /// Present exactly when `label` is cancerous.
    pub tumor_bbox: Option<PixelBox>,
    pub slice_id: String,
    /// Free-form provenance; the phantom records its generator internals.
    pub modality_meta: BTreeMap<String, String>,
}

struct BodyEllipse {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
}

fn sample_point_in_ellipse(body: &BodyEllipse, margin: f32, rng: &mut ChaCha8Rng) -> (f32, f32) {
    let rho = rng.random_range(0.0..1.0f32).sqrt();
    let theta = rng.random_range(0.0..TAU);
    let ax = (body.a - margin).max(1.0);
    let ay = (body.b - margin).max(1.0);
    (
        body.cx + rho * ax * theta.cos(),
        body.cy + rho * ay * theta.sin(),
    )
}

fn render_ct_background(size: usize, rng: &mut ChaCha8Rng) -> (Grid, BodyEllipse) {
    let s = size as f32;
    let body = BodyEllipse {
        cx: s * rng.random_range(0.48..0.52),
        cy: s * rng.random_range(0.50..0.54),
        a: s * rng.random_range(0.40..0.44),
        b: s * rng.random_range(0.34..0.38),
    };
    // low-frequency texture: a few broad gaussian bumps inside the body
    let bumps: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            let (bx, by) = sample_point_in_ellipse(&body, 0.0, rng);
            let amp = rng.random_range(-0.03..0.03f32);
            let sigma = s * rng.random_range(0.15..0.30);
            (bx, by, amp, sigma)
        })
        .collect();
    let mut grid = Grid::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f32 - body.cx) / body.a;
            let dy = (y as f32 - body.cy) / body.b;
            let e = dx * dx + dy * dy;
            // soft ellipse edge
            let t = ((1.06 - e) / 0.12).clamp(0.0, 1.0);
            let mut v = 0.05 + 0.30 * t;
            if t > 0.0 {
                for &(bx, by, amp, sigma) in &bumps {
                    let dd = (x as f32 - bx).powi(2) + (y as f32 - by).powi(2);
                    v += t * amp * (-dd / (2.0 * sigma * sigma)).exp();
                }
            }
            grid[[y, x]] = v;
        }
    }
    (grid, body)
}

/// Blend a soft-edged disk of the given intensity into the grid.
fn render_disk(grid: &mut Grid, cx: f32, cy: f32, r: f32, intensity: f32) {
    let size = grid.nrows();
    let y_lo = ((cy - r - 1.0).floor().max(0.0)) as usize;
    let y_hi = ((cy + r + 1.0).ceil().min(size as f32 - 1.0)) as usize;
    let x_lo = ((cx - r - 1.0).floor().max(0.0)) as usize;
    let x_hi = ((cx + r + 1.0).ceil().min(size as f32 - 1.0)) as usize;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            let w = (r + 0.5 - d).clamp(0.0, 1.0);
            if w > 0.0 {
                let v = grid[[y, x]];
                grid[[y, x]] = v * (1.0 - w) + intensity * w;
            }
        }
    }
}

/// Add a Gaussian bump (used for PET activity and hotspots).
fn render_gaussian(grid: &mut Grid, cx: f32, cy: f32, sigma: f32, peak: f32) {
    let size = grid.nrows();
    let reach = (3.5 * sigma).ceil();
    let y_lo = ((cy - reach).floor().max(0.0)) as usize;
    let y_hi = ((cy + reach).ceil().min(size as f32 - 1.0)) as usize;
    let x_lo = ((cx - reach).floor().max(0.0)) as usize;
    let x_hi = ((cx + reach).ceil().min(size as f32 - 1.0)) as usize;
    let denom = 2.0 * sigma * sigma;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dd = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
            grid[[y, x]] += peak * (-dd / denom).exp();
        }
    }
}

fn render_pet_background(size: usize, body: &BodyEllipse, rng: &mut ChaCha8Rng) -> Grid {
    let s = size as f32;
    let mut grid = Grid::from_elem((size, size), 0.02f32);
    let n_blobs = rng.random_range(2..=4usize);
    for _ in 0..n_blobs {
        let (bx, by) = sample_point_in_ellipse(body, 3.0, rng);
        let peak = rng.random_range(0.10..0.22f32);
        let sigma = s * rng.random_range(0.06..0.12);
        render_gaussian(&mut grid, bx, by, sigma, peak);
    }
    grid
}

fn add_noise_and_clip(grid: &mut Grid, sigma: f32, rng: &mut ChaCha8Rng) {
    for v in grid.iter_mut() {
        let z: f32 = rng.sample(StandardNormal);
        *v = (*v + sigma * z).clamp(0.0, 1.0);
    }
}

fn fmt_f32(v: f32) -> String {
    format!("{v:.3}")
}

enum SliceKind {
    Cancerous,
    Plain,
    DecoyCt,
    DecoyPet,
}

fn generate_slice(cfg: &PhantomConfig, index: usize, kind: SliceKind) -> SlicePair {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let size = cfg.image_size;

    let (mut ct, body) = render_ct_background(size, &mut rng);
    let mut pet = render_pet_background(size, &body, &mut rng);

    let mut meta = BTreeMap::new();
    let mut bbox = None;
    let (lo, hi) = cfg.lesion_radius_range;

    // Lesion and hotspot parameters are drawn identically for real tumors
    // and for decoys, so a single modality carries no distributional tell.
    let draw_focus = |rng: &mut ChaCha8Rng| {
        let r = if lo < hi { rng.random_range(lo..hi) } else { lo };
        let intensity = rng.random_range(0.58..0.70f32);
        (r, intensity)
    };

    match kind {
        SliceKind::Cancerous => {
            let (r, intensity) = draw_focus(&mut rng);
            let (cx, cy) = sample_point_in_ellipse(&body, r + 3.0, &mut rng);
            render_disk(&mut ct, cx, cy, r, intensity);
            let sigma = 0.45 * r;
            render_gaussian(&mut pet, cx, cy, sigma, cfg.hotspot_intensity);
            bbox = Some(PixelBox {
                x0: (cx - r).floor().max(0.0) as usize,
                y0: (cy - r).floor().max(0.0) as usize,
                x1: ((cx + r).ceil() as usize).min(size - 1),
                y1: ((cy + r).ceil() as usize).min(size - 1),
            });
            meta.insert("kind".into(), "cancerous".into());
            meta.insert("has_ct_lesion".into(), "true".into());
            meta.insert("has_pet_hotspot".into(), "true".into());
            meta.insert("co_located".into(), "true".into());
            meta.insert("lesion_cx".into(), fmt_f32(cx));
            meta.insert("lesion_cy".into(), fmt_f32(cy));
            meta.insert("lesion_r".into(), fmt_f32(r));
            meta.insert("hotspot_cx".into(), fmt_f32(cx));
            meta.insert("hotspot_cy".into(), fmt_f32(cy));
            meta.insert("hotspot_sigma".into(), fmt_f32(sigma));
        }
        SliceKind::Plain => {
            meta.insert("kind".into(), "healthy".into());
            meta.insert("has_ct_lesion".into(), "false".into());
            meta.insert("has_pet_hotspot".into(), "false".into());
            meta.insert("co_located".into(), "false".into());
        }
        SliceKind::DecoyCt => {
            let (r, intensity) = draw_focus(&mut rng);
            let (cx, cy) = sample_point_in_ellipse(&body, r + 3.0, &mut rng);
            render_disk(&mut ct, cx, cy, r, intensity);
            meta.insert("kind".into(), "decoy_ct".into());
            meta.insert("has_ct_lesion".into(), "true".into());
            meta.insert("has_pet_hotspot".into(), "false".into());
            meta.insert("co_located".into(), "false".into());
            meta.insert("lesion_cx".into(), fmt_f32(cx));
            meta.insert("lesion_cy".into(), fmt_f32(cy));
            meta.insert("lesion_r".into(), fmt_f32(r));
        }
        SliceKind::DecoyPet => {
            let (r, _) = draw_focus(&mut rng);
            let (cx, cy) = sample_point_in_ellipse(&body, r + 3.0, &mut rng);
            let sigma = 0.45 * r;
            render_gaussian(&mut pet, cx, cy, sigma, cfg.hotspot_intensity);
            meta.insert("kind".into(), "decoy_pet".into());
            meta.insert("has_ct_lesion".into(), "false".into());
            meta.insert("has_pet_hotspot".into(), "true".into());
            meta.insert("co_located".into(), "false".into());
            meta.insert("hotspot_cx".into(), fmt_f32(cx));
            meta.insert("hotspot_cy".into(), fmt_f32(cy));
            meta.insert("hotspot_sigma".into(), fmt_f32(sigma));
        }
    }

    add_noise_and_clip(&mut ct, cfg.noise_sigma, &mut rng);
    add_noise_and_clip(&mut pet, cfg.noise_sigma, &mut rng);

    let label = if bbox.is_some() {
        Label::Cancerous
    } else {
        Label::Healthy
    };
    SlicePair {
        ct,
        pet,
        label,
        tumor_bbox: bbox,
        slice_id: format!("ph-{index:05}"),
        modality_meta: meta,
    }
}

/// Generate the configured number of cancerous and healthy slice pairs.
/// Deterministic for a fixed config: each slice draws from its own
/// counter-indexed stream of the seed.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Vec<SlicePair>> {
    cfg.validate()?;
    let total = cfg.num_cancerous + cfg.num_healthy;
    let mut out = Vec::with_capacity(total);
    for i in 0..cfg.num_cancerous {
        out.push(generate_slice(cfg, i, SliceKind::Cancerous));
    }
    // decoy assignment comes from a dedicated stream so slice imagery and
    // slice role stay independently reproducible
    let mut decoy_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    decoy_rng.set_stream(u64::MAX);
    for j in 0..cfg.num_healthy {
        let kind = if decoy_rng.random_range(0.0..1.0f64) < cfg.decoy_rate {
            if decoy_rng.random_range(0.0..1.0f64) < 0.5 {
                SliceKind::DecoyCt
            } else {
                SliceKind::DecoyPet
            }
        } else {
            SliceKind::Plain
        };
        out.push(generate_slice(cfg, cfg.num_cancerous + j, kind));
    }
    Ok(out)
}

/// Best single-threshold accuracy achievable on the per-slice maximum
/// intensity of each modality alone. This is the brute-force oracle
/// quantifying how far decoys cap single-modality performance.
pub fn single_modality_bayes_gap(pairs: &[SlicePair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::DegenerateInput("empty slice list".into()));
    }
    let labels: Vec<bool> = pairs.iter().map(|p| p.label.is_positive()).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::DegenerateInput(
            "both classes required to evaluate a threshold rule".into(),
        ));
    }
    let summary = |grid: &Grid| grid.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let ct_scores: Vec<f32> = pairs.iter().map(|p| summary(&p.ct)).collect();
    let pet_scores: Vec<f32> = pairs.iter().map(|p| summary(&p.pet)).collect();
    Ok((
        best_threshold_accuracy(&ct_scores, &labels),
        best_threshold_accuracy(&pet_scores, &labels),
    ))
}

/// Exhaustive sweep over every cut position and both orientations.
fn best_threshold_accuracy(scores: &[f32], labels: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let total_pos: usize = labels.iter().filter(|&&l| l).count();
    // prefix_pos[i]: positives among the i lowest scores
    let mut prefix_pos = vec![0usize; n + 1];
    for (rank, &idx) in order.iter().enumerate() {
        prefix_pos[rank + 1] = prefix_pos[rank] + usize::from(labels[idx]);
    }
    let mut best = 0usize;
    for cut in 0..=n {
        // rule: the (n - cut) highest scores are called positive
        let correct_high = (total_pos - prefix_pos[cut]) + (cut - prefix_pos[cut]);
        // inverted rule: the cut lowest scores are called positive
        let correct_low = prefix_pos[cut] + ((n - cut) - (total_pos - prefix_pos[cut]));
        best = best.max(correct_high).max(correct_low);
    }
    best as f64 / n as f64
}
