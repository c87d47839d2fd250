//! Dataset ingestion: HU normalization, slice resizing, the stratified
//! train/test split, and the manifest that tracks every slice through the
//! pipeline. Also hosts the external-volume adapter (one volume = a
//! directory of container files plus sidecar metadata).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::phantom::{Label, PixelBox, SlicePair};
use crate::Grid;

/// Preprocessing and split parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Lower clip bound of the CT Hounsfield window.
    pub hu_min: f32,
    /// Upper clip bound of the CT Hounsfield window.
    pub hu_max: f32,
    /// Square side of preprocessed slices.
    pub target_size: usize,
    /// Train fraction of the per-label stratified split.
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            hu_min: -1024.0,
            hu_max: 3071.0,
            target_size: 128,
            split_ratio: 0.8,
            split_seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hu_min < self.hu_max) {
            return Err(Error::Config(format!(
                "hu window [{}, {}] is empty",
                self.hu_min, self.hu_max
            )));
        }
        if self.target_size < 32 {
            return Err(Error::Config(format!(
                "target_size must be >= 32, got {}",
                self.target_size
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split_ratio {} must lie in (0, 1)",
                self.split_ratio
            )));
        }
        Ok(())
    }
}

/// Clip to the configured Hounsfield window and map affinely onto [0, 1].
pub fn normalize_hu(raw: &Grid, cfg: &PreprocessConfig) -> Result<Grid> {
    cfg.validate()?;
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in raw CT grid".into()));
    }
    let span = cfg.hu_max - cfg.hu_min;
    Ok(raw.mapv(|v| (v.clamp(cfg.hu_min, cfg.hu_max) - cfg.hu_min) / span))
}

/// Min-max normalization onto [0, 1] over the provided extrema (PET has no
/// calibrated scale; extrema are computed per volume). A zero span maps to
/// all zeros.
pub fn normalize_minmax(raw: &Grid, lo: f32, hi: f32) -> Result<Grid> {
    if raw.iter().any(|v| !v.is_finite()) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Data("non-finite value in raw PET grid".into()));
    }
    if hi <= lo {
        return Ok(Grid::zeros(raw.dim()));
    }
    let span = hi - lo;
    Ok(raw.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0)))
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Bilinear resampling to a square `target x target` grid. Identity when the
/// input is already the target size.
pub fn resize_slice(img: &Grid, target: usize) -> Result<Grid> {
    let (rows, cols) = img.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Data("resize of empty grid".into()));
    }
    if target == 0 {
        return Err(Error::Data("resize target must be positive".into()));
    }
    if rows == target && cols == target {
        return Ok(img.clone());
    }
    let sy = rows as f32 / target as f32;
    let sx = cols as f32 / target as f32;
    let mut out = Grid::zeros((target, target));
    for y in 0..target {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (rows - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let ty = fy - y0 as f32;
        for x in 0..target {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (cols - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let tx = fx - x0 as f32;
            let top = lerp(img[[y0, x0]], img[[y0, x1]], tx);
            let bottom = lerp(img[[y1, x0]], img[[y1, x1]], tx);
            out[[y, x]] = lerp(top, bottom, ty);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSet {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceSource {
    Phantom,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slice_id: String,
    pub label: Label,
    pub split: SplitSet,
    pub source: SliceSource,
    pub augmentation_parent: Option<String>,
}

/// Declarative index of every slice, its split assignment, and augmentation
/// lineage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub created_at: String,
    pub config_digest: String,
}

impl DatasetManifest {
    /// Check id uniqueness, split disjointness, and augmentation lineage.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.slice_id.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate slice_id '{}' in manifest",
                    e.slice_id
                )));
            }
        }
        let by_id: HashMap<&str, &ManifestEntry> = self
            .entries
            .iter()
            .map(|e| (e.slice_id.as_str(), e))
            .collect();
        for e in &self.entries {
            if let Some(parent) = &e.augmentation_parent {
                let p = by_id.get(parent.as_str()).ok_or_else(|| {
                    Error::Data(format!(
                        "augmentation parent '{parent}' of '{}' not in manifest",
                        e.slice_id
                    ))
                })?;
                if p.split != SplitSet::Train {
                    return Err(Error::Contamination(format!(
                        "augmentation parent '{parent}' is not a train-split entry"
                    )));
                }
                if e.split != SplitSet::Train {
                    return Err(Error::Contamination(format!(
                        "augmented slice '{}' assigned outside the train split",
                        e.slice_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entry(&self, slice_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.slice_id == slice_id)
    }

    pub fn ids_in(&self, split: SplitSet) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.slice_id.as_str())
            .collect()
    }

    /// Originals only (no augmentation lineage) in the given split.
    pub fn original_ids_in(&self, split: SplitSet) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split && e.augmentation_parent.is_none())
            .map(|e| e.slice_id.as_str())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Stratified 4:1-style split: per label, train takes `floor(ratio * n)`
/// shuffled slices and the remainder goes to test. Deterministic under
/// `split_seed`.
pub fn split_dataset(pairs: &[SlicePair], cfg: &PreprocessConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::DegenerateInput("no slices to split".into()));
    }
    let mut by_label: BTreeMap<bool, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_label.entry(p.label.is_positive()).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(Error::DegenerateInput(
            "both labels must be present to stratify".into(),
        ));
    }
    for (positive, idx) in &by_label {
        if idx.len() < 2 {
            return Err(Error::DegenerateInput(format!(
                "class {} has fewer than 2 slices",
                if *positive { "cancerous" } else { "healthy" }
            )));
        }
    }

    let mut assignment: Vec<(usize, SplitSet)> = Vec::with_capacity(pairs.len());
    for (positive, mut idx) in by_label {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.split_seed);
        rng.set_stream(u64::from(positive));
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let train_n = (cfg.split_ratio * idx.len() as f64).floor() as usize;
        for (rank, &slice_idx) in idx.iter().enumerate() {
            let split = if rank < train_n {
                SplitSet::Train
            } else {
                SplitSet::Test
            };
            assignment.push((slice_idx, split));
        }
    }

    let mut entries: Vec<ManifestEntry> = assignment
        .into_iter()
        .map(|(i, split)| {
            let source = match pairs[i].modality_meta.get("source").map(String::as_str) {
                Some("external") => SliceSource::External,
                _ => SliceSource::Phantom,
            };
            ManifestEntry {
                slice_id: pairs[i].slice_id.clone(),
                label: pairs[i].label,
                split,
                source,
                augmentation_parent: None,
            }
        })
        .collect();
    entries.sort_by(|a, b| a.slice_id.cmp(&b.slice_id));

    let manifest = DatasetManifest {
        entries,
        created_at: chrono::Utc::now().to_rfc3339(),
        config_digest: digest_of(cfg)?,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// SHA-256 hex digest of a canonically serialized value.
pub fn digest_of<T: Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let canonical =
        serde_json::to_vec(value).map_err(|e| Error::Format(format!("digest: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    let out = hasher.finalize();
    Ok(out.iter().map(|b| format!("{b:02x}")).collect())
}

// ---------------------------------------------------------------------------
// Slice-pair persistence (phantom emission + external volume adapter)
// ---------------------------------------------------------------------------

fn ct_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.ct.pac"))
}

fn pet_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.pet.pac"))
}

/// Persist a normalized slice pair into `dir` as two container files; the CT
/// sidecar carries label, bounding box, and provenance metadata.
pub fn write_slice_pair(dir: &Path, pair: &SlicePair) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    container::write_grid(&ct_path(dir, &pair.slice_id), &pair.ct)?;
    container::write_grid(&pet_path(dir, &pair.slice_id), &pair.pet)?;
    let mut meta = pair.modality_meta.clone();
    meta.insert("slice_id".into(), pair.slice_id.clone());
    meta.insert(
        "label".into(),
        if pair.label.is_positive() {
            "cancerous".into()
        } else {
            "healthy".into()
        },
    );
    if let Some(b) = &pair.tumor_bbox {
        meta.insert("bbox_x0".into(), b.x0.to_string());
        meta.insert("bbox_y0".into(), b.y0.to_string());
        meta.insert("bbox_x1".into(), b.x1.to_string());
        meta.insert("bbox_y1".into(), b.y1.to_string());
    }
    container::write_meta(&ct_path(dir, &pair.slice_id), &meta)?;
    Ok(())
}

/// Load a slice pair persisted by [`write_slice_pair`].
pub fn read_slice_pair(dir: &Path, slice_id: &str) -> Result<SlicePair> {
    let ct = container::read_grid(&ct_path(dir, slice_id))?;
    let pet = container::read_grid(&pet_path(dir, slice_id))?;
    let meta = container::read_meta(&ct_path(dir, slice_id))?;
    let label = match meta.get("label").map(String::as_str) {
        Some("cancerous") => Label::Cancerous,
        Some("healthy") => Label::Healthy,
        other => {
            return Err(Error::Format(format!(
                "slice {slice_id}: bad label {other:?}"
            )))
        }
    };
    let tumor_bbox = match (
        meta.get("bbox_x0"),
        meta.get("bbox_y0"),
        meta.get("bbox_x1"),
        meta.get("bbox_y1"),
    ) {
        (Some(x0), Some(y0), Some(x1), Some(y1)) => Some(PixelBox {
            x0: x0.parse().map_err(|_| bad_bbox(slice_id))?,
            y0: y0.parse().map_err(|_| bad_bbox(slice_id))?,
            x1: x1.parse().map_err(|_| bad_bbox(slice_id))?,
            y1: y1.parse().map_err(|_| bad_bbox(slice_id))?,
        }),
        (None, None, None, None) => None,
        _ => return Err(bad_bbox(slice_id)),
    };
    if label.is_positive() != tumor_bbox.is_some() {
        return Err(Error::Format(format!(
            "slice {slice_id}: label and bounding box disagree"
        )));
    }
    Ok(SlicePair {
        ct,
        pet,
        label,
        tumor_bbox,
        slice_id: slice_id.to_string(),
        modality_meta: meta,
    })
}

fn bad_bbox(slice_id: &str) -> Error {
    Error::Format(format!("slice {slice_id}: incomplete bounding box record"))
}

/// Load an external co-registered volume: a directory holding raw
/// `ct_NNNN.pac` (Hounsfield units) and `pet_NNNN.pac` (arbitrary uptake
/// scale) files paired by slice index, each CT sidecar carrying a `label`
/// key. CT slices get the configured HU window; PET slices are min-max
/// normalized with volume-wide extrema; both are resized to `target_size`.
pub fn load_external_volume(dir: &Path, cfg: &PreprocessConfig) -> Result<Vec<SlicePair>> {
    cfg.validate()?;
    let volume_name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    let mut ct_files = Vec::new();
    let mut pet_files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if name.starts_with("ct_") && name.ends_with(".pac") {
            ct_files.push(path);
        } else if name.starts_with("pet_") && name.ends_with(".pac") {
            pet_files.push(path);
        }
    }
    ct_files.sort();
    pet_files.sort();
    if ct_files.is_empty() {
        return Err(Error::Data(format!(
            "volume {volume_name}: no ct_*.pac slices found"
        )));
    }
    if ct_files.len() != pet_files.len() {
        return Err(Error::Data(format!(
            "volume {volume_name}: {} CT slices vs {} PET slices (paired by index)",
            ct_files.len(),
            pet_files.len()
        )));
    }

    // volume-wide PET extrema
    let pet_raw: Vec<Grid> = pet_files
        .iter()
        .map(|p| container::read_grid(p))
        .collect::<Result<_>>()?;
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for g in &pet_raw {
        for &v in g.iter() {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "volume {volume_name}: non-finite PET value"
                )));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }

    let mut out = Vec::with_capacity(ct_files.len());
    for (idx, (ct_file, pet_grid)) in ct_files.iter().zip(pet_raw.into_iter()).enumerate() {
        let raw_ct = container::read_grid(ct_file)?;
        let ct = resize_slice(&normalize_hu(&raw_ct, cfg)?, cfg.target_size)?;
        let pet = resize_slice(&normalize_minmax(&pet_grid, lo, hi)?, cfg.target_size)?;
        let meta = container::read_meta(ct_file).unwrap_or_default();
        let label = match meta.get("label").map(String::as_str) {
            Some("cancerous") => Label::Cancerous,
            Some("healthy") | None => Label::Healthy,
            Some(other) => {
                return Err(Error::Format(format!(
                    "volume {volume_name} slice {idx}: bad label '{other}'"
                )))
            }
        };
        let mut modality_meta = meta;
        modality_meta.insert("source".into(), "external".into());
        modality_meta.insert("volume".into(), volume_name.clone());
        out.push(SlicePair {
            ct,
            pet,
            label,
            // external volumes carry no tumor boxes; localization scoring
            // is phantom-only
            tumor_bbox: None,
            slice_id: format!("{volume_name}-{idx:04}"),
            modality_meta,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use proptest::prelude::*;

    fn cfg() -> PreprocessConfig {
        PreprocessConfig::default()
    }

    #[test]
    fn hu_window_endpoints_map_to_unit_interval() {
        let raw = Grid::from_shape_vec((1, 3), vec![-1024.0, 3071.0, 1023.5]).unwrap();
        let out = normalize_hu(&raw, &cfg()).unwrap();
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[0, 1]], 1.0);
        assert_eq!(out[[0, 2]], 0.5); // (1023.5 + 1024) / 4095
    }

    #[test]
    fn hu_values_below_window_clip_to_zero() {
        let raw = Grid::from_elem((2, 2), -2000.0);
        let out = normalize_hu(&raw, &cfg()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_hu_is_data_error() {
        let raw = Grid::from_elem((1, 1), f32::INFINITY);
        assert!(matches!(normalize_hu(&raw, &cfg()), Err(Error::Data(_))));
    }

    #[test]
    fn minmax_handles_constant_volume() {
        let raw = Grid::from_elem((2, 2), 7.0);
        let out = normalize_minmax(&raw, 7.0, 7.0).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_identity_when_already_target() {
        let img = Grid::from_shape_fn((128, 128), |(i, j)| ((i * j) % 7) as f32 / 7.0);
        let out = resize_slice(&img, 128).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn resize_preserves_constants() {
        let img = Grid::from_elem((64, 64), 0.3f32);
        let out = resize_slice(&img, 128).unwrap();
        assert_eq!(out.dim(), (128, 128));
        for &v in out.iter() {
            assert_eq!(v, 0.3);
        }
    }

    #[test]
    fn ramp_survives_down_up_round_trip() {
        let img = Grid::from_shape_fn((128, 128), |(_, j)| j as f32 / 127.0);
        let down = resize_slice(&img, 64).unwrap();
        let up = resize_slice(&down, 128).unwrap();
        let max_dev = img
            .iter()
            .zip(up.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_dev < 0.05, "max deviation {max_dev}");
    }

    #[test]
    fn resize_empty_is_data_error() {
        let img = Grid::zeros((0, 0));
        assert!(matches!(resize_slice(&img, 32), Err(Error::Data(_))));
    }

    fn phantom(n_c: usize, n_h: usize) -> Vec<SlicePair> {
        generate_phantom(&PhantomConfig {
            seed: 5,
            num_cancerous: n_c,
            num_healthy: n_h,
            image_size: 32,
            lesion_radius_range: (3.0, 6.0),
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn split_reproduces_published_counts() {
        // 80 cancerous / 453 healthy -> 64/16 train/test and 362/91
        let pairs = phantom(80, 453);
        let manifest = split_dataset(&pairs, &cfg()).unwrap();
        let count = |split, positive| {
            manifest
                .entries
                .iter()
                .filter(|e| e.split == split && e.label.is_positive() == positive)
                .count()
        };
        assert_eq!(count(SplitSet::Train, true), 64);
        assert_eq!(count(SplitSet::Test, true), 16);
        assert_eq!(count(SplitSet::Train, false), 362);
        assert_eq!(count(SplitSet::Test, false), 91);
    }

    #[test]
    fn split_five_slices_gives_four_one() {
        let pairs = phantom(5, 5);
        let manifest = split_dataset(&pairs, &cfg()).unwrap();
        let train_pos = manifest
            .entries
            .iter()
            .filter(|e| e.split == SplitSet::Train && e.label.is_positive())
            .count();
        assert_eq!(train_pos, 4);
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let pairs = phantom(10, 30);
        let a = split_dataset(&pairs, &cfg()).unwrap();
        let b = split_dataset(&pairs, &cfg()).unwrap();
        assert_eq!(a.entries, b.entries);
        assert_eq!(a.config_digest, b.config_digest);

        let mut other = cfg();
        other.split_seed = 1;
        let c = split_dataset(&pairs, &other).unwrap();
        assert_ne!(a.entries, c.entries);
    }

    #[test]
    fn split_train_test_disjoint() {
        let pairs = phantom(12, 20);
        let manifest = split_dataset(&pairs, &cfg()).unwrap();
        let train: HashSet<_> = manifest.ids_in(SplitSet::Train).into_iter().collect();
        let test: HashSet<_> = manifest.ids_in(SplitSet::Test).into_iter().collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), 32);
    }

    #[test]
    fn split_degenerate_class_rejected() {
        let pairs = phantom(1, 30);
        assert!(matches!(
            split_dataset(&pairs, &cfg()),
            Err(Error::DegenerateInput(_))
        ));
        let pairs = phantom(0, 30);
        assert!(matches!(
            split_dataset(&pairs, &cfg()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn manifest_validation_catches_contamination() {
        let mk = |id: &str, split, parent: Option<&str>| ManifestEntry {
            slice_id: id.into(),
            label: Label::Healthy,
            split,
            source: SliceSource::Phantom,
            augmentation_parent: parent.map(String::from),
        };
        // parent in test split
        let m = DatasetManifest {
            entries: vec![
                mk("a", SplitSet::Test, None),
                mk("a-aug", SplitSet::Train, Some("a")),
            ],
            created_at: String::new(),
            config_digest: String::new(),
        };
        assert!(matches!(m.validate(), Err(Error::Contamination(_))));
        // augmented entry leaking into test
        let m = DatasetManifest {
            entries: vec![
                mk("a", SplitSet::Train, None),
                mk("a-aug", SplitSet::Test, Some("a")),
            ],
            created_at: String::new(),
            config_digest: String::new(),
        };
        assert!(matches!(m.validate(), Err(Error::Contamination(_))));
        // duplicate id
        let m = DatasetManifest {
            entries: vec![mk("a", SplitSet::Train, None), mk("a", SplitSet::Test, None)],
            created_at: String::new(),
            config_digest: String::new(),
        };
        assert!(matches!(m.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = phantom(4, 6);
        let manifest = split_dataset(&pairs, &cfg()).unwrap();
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(manifest.entries, back.entries);
        assert_eq!(manifest.config_digest, back.config_digest);
    }

    #[test]
    fn slice_pair_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = phantom(2, 1);
        for p in &pairs {
            write_slice_pair(dir.path(), p).unwrap();
            let back = read_slice_pair(dir.path(), &p.slice_id).unwrap();
            assert_eq!(back.label, p.label);
            assert_eq!(back.tumor_bbox, p.tumor_bbox);
            assert_eq!(back.ct, p.ct);
            assert_eq!(back.pet, p.pet);
        }
    }

    #[test]
    fn external_volume_adapter_normalizes_and_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let vol = dir.path().join("vol-a");
        std::fs::create_dir_all(&vol).unwrap();
        // two 16x16 raw slices; CT in HU, PET on an arbitrary scale
        for i in 0..2 {
            let ct = Grid::from_shape_fn((16, 16), |(y, x)| {
                -1024.0 + (y * 16 + x) as f32 * 16.0 + i as f32
            });
            let pet = Grid::from_shape_fn((16, 16), |(y, x)| (y + x) as f32 * (i + 1) as f32);
            container::write_grid(&vol.join(format!("ct_{i:04}.pac")), &ct).unwrap();
            container::write_grid(&vol.join(format!("pet_{i:04}.pac")), &pet).unwrap();
            let mut meta = BTreeMap::new();
            meta.insert(
                "label".to_string(),
                if i == 0 { "healthy" } else { "cancerous" }.to_string(),
            );
            container::write_meta(&vol.join(format!("ct_{i:04}.pac")), &meta).unwrap();
        }
        let mut pc = cfg();
        pc.target_size = 32;
        let pairs = load_external_volume(&vol, &pc).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].label, Label::Healthy);
        assert_eq!(pairs[1].label, Label::Cancerous);
        for p in &pairs {
            assert_eq!(p.ct.dim(), (32, 32));
            assert_eq!(p.pet.dim(), (32, 32));
            for v in p.ct.iter().chain(p.pet.iter()) {
                assert!((0.0..=1.0).contains(v));
            }
            assert_eq!(p.modality_meta["source"], "external");
        }
        // PET extrema are volume-wide: slice 1 values reach exactly 1.0,
        // slice 0 stays strictly below
        let max0 = pairs[0].pet.iter().fold(0.0f32, |a, &b| a.max(b));
        let max1 = pairs[1].pet.iter().fold(0.0f32, |a, &b| a.max(b));
        assert!(max1 > 0.99);
        assert!(max0 < 0.6);
    }

    #[test]
    fn external_volume_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vol = dir.path().join("vol-b");
        std::fs::create_dir_all(&vol).unwrap();
        let g = Grid::zeros((8, 8));
        container::write_grid(&vol.join("ct_0000.pac"), &g).unwrap();
        container::write_grid(&vol.join("ct_0001.pac"), &g).unwrap();
        container::write_grid(&vol.join("pet_0000.pac"), &g).unwrap();
        assert!(matches!(
            load_external_volume(&vol, &cfg()),
            Err(Error::Data(_))
        ));
    }

    proptest! {
        #[test]
        fn normalize_hu_is_monotone(a in -3000.0f32..4000.0, b in -3000.0f32..4000.0) {
            let raw = Grid::from_shape_vec((1, 2), vec![a, b]).unwrap();
            let out = normalize_hu(&raw, &cfg()).unwrap();
            if a <= b {
                prop_assert!(out[[0, 0]] <= out[[0, 1]]);
            } else {
                prop_assert!(out[[0, 0]] >= out[[0, 1]]);
            }
            prop_assert!((0.0..=1.0).contains(&out[[0, 0]]));
        }

        #[test]
        fn split_counts_within_one_of_ratio(n_c in 2usize..40, n_h in 2usize..60, seed in 0u64..5) {
            let mut pc = cfg();
            pc.split_seed = seed;
            let pairs = phantom(n_c, n_h);
            let manifest = split_dataset(&pairs, &pc).unwrap();
            for positive in [true, false] {
                let total = if positive { n_c } else { n_h };
                let train = manifest.entries.iter()
                    .filter(|e| e.split == SplitSet::Train && e.label.is_positive() == positive)
                    .count();
                let exact = pc.split_ratio * total as f64;
                prop_assert!((train as f64 - exact).abs() < 1.0);
            }
        }
    }
}
