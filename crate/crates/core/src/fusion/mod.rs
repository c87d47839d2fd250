//! Multimodal image fusion: per-modality PCA reconstruction feeding a
//! convolutional autoencoder (the primary strategy), plus the ablation
//! baselines (PCA-only, autoencoder-only, pixel mean, pixel max).

pub mod autoencoder;
pub mod pca;

use serde::{Deserialize, Serialize};

pub use autoencoder::{
    train_autoencoder, AeTarget, AeTrainOptions, Autoencoder, AutoencoderSpec,
};
pub use pca::{pca_fit, pca_reconstruct, pca_reconstruct_raw, PcaReduction};

use crate::error::{Error, Result};
use crate::phantom::SlicePair;
use crate::Grid;

/// Default number of principal components retained per modality.
pub const DEFAULT_PCA_COMPONENTS: usize = 20;

/// How a CT/PET pair is collapsed into one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// PCA reconstruction of each modality, decoded by the autoencoder.
    Pcae,
    /// Pixel-wise mean of the two PCA reconstructions.
    PcaOnly,
    /// Autoencoder applied to the raw normalized modalities.
    AeOnly,
    /// Pixel-wise mean of the normalized inputs.
    Mean,
    /// Pixel-wise max of the normalized inputs.
    Max,
}

impl FusionStrategy {
    pub fn needs_autoencoder(self) -> bool {
        matches!(self, FusionStrategy::Pcae | FusionStrategy::AeOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Pcae => "pcae",
            FusionStrategy::PcaOnly => "pca_only",
            FusionStrategy::AeOnly => "ae_only",
            FusionStrategy::Mean => "mean",
            FusionStrategy::Max => "max",
        }
    }

    pub fn all() -> [FusionStrategy; 5] {
        [
            FusionStrategy::Pcae,
            FusionStrategy::PcaOnly,
            FusionStrategy::AeOnly,
            FusionStrategy::Mean,
            FusionStrategy::Max,
        ]
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcae" => Ok(FusionStrategy::Pcae),
            "pca_only" => Ok(FusionStrategy::PcaOnly),
            "ae_only" => Ok(FusionStrategy::AeOnly),
            "mean" => Ok(FusionStrategy::Mean),
            "max" => Ok(FusionStrategy::Max),
            other => Err(Error::Config(format!("unknown fusion strategy '{other}'"))),
        }
    }
}

/// A fused single-channel image with its provenance.
#[derive(Debug, Clone)]
pub struct FusedSlice {
    pub image: Grid,
    pub strategy: FusionStrategy,
    pub slice_id: String,
    /// Slice this image was derived from (the source pair for direct
    /// fusion; the source fused slice for augmented copies).
    pub parent_slice_id: String,
}

/// Models a fusion strategy may require. PCA is fit per image; only the
/// autoencoder carries trained state.
#[derive(Debug, Clone, Default)]
pub struct FusionModels {
    pub autoencoder: Option<Autoencoder>,
    pub pca_k: Option<usize>,
}

impl FusionModels {
    pub fn none() -> Self {
        FusionModels::default()
    }

    pub fn with_autoencoder(ae: Autoencoder, pca_k: usize) -> Self {
        FusionModels {
            autoencoder: Some(ae),
            pca_k: Some(pca_k),
        }
    }

    pub fn k(&self) -> usize {
        self.pca_k.unwrap_or(DEFAULT_PCA_COMPONENTS)
    }
}

/// Reconstruct one modality through its top-k principal components.
pub fn pca_pass(img: &Grid, k: usize) -> Result<Grid> {
    let red = pca_fit(img, k)?;
    pca_reconstruct(img, &red)
}

fn pixelwise(a: &Grid, b: &Grid, f: impl Fn(f32, f32) -> f32) -> Grid {
    Grid::from_shape_fn(a.dim(), |(i, j)| f(a[[i, j]], b[[i, j]]))
}

/// Fuse one slice pair under the given strategy.
pub fn fuse(
    pair: &SlicePair,
    strategy: FusionStrategy,
    models: &mut FusionModels,
) -> Result<FusedSlice> {
    if pair.ct.dim() != pair.pet.dim() {
        return Err(Error::Data(format!(
            "slice {}: modality shapes differ: {:?} vs {:?}",
            pair.slice_id,
            pair.ct.dim(),
            pair.pet.dim()
        )));
    }
    let image = match strategy {
        FusionStrategy::Pcae => {
            let k = models.k();
            let r_ct = pca_pass(&pair.ct, k)?;
            let r_pet = pca_pass(&pair.pet, k)?;
            let ae = models.autoencoder.as_mut().ok_or_else(|| {
                Error::Config("pcae fusion requires a trained autoencoder".into())
            })?;
            ae.decode(&r_ct, &r_pet)?
        }
        FusionStrategy::PcaOnly => {
            let k = models.k();
            let r_ct = pca_pass(&pair.ct, k)?;
            let r_pet = pca_pass(&pair.pet, k)?;
            pixelwise(&r_ct, &r_pet, |a, b| 0.5 * (a + b))
        }
        FusionStrategy::AeOnly => {
            let ae = models.autoencoder.as_mut().ok_or_else(|| {
                Error::Config("ae_only fusion requires a trained autoencoder".into())
            })?;
            ae.decode(&pair.ct, &pair.pet)?
        }
        FusionStrategy::Mean => pixelwise(&pair.ct, &pair.pet, |a, b| 0.5 * (a + b)),
        FusionStrategy::Max => pixelwise(&pair.ct, &pair.pet, f32::max),
    };
    Ok(FusedSlice {
        image,
        strategy,
        slice_id: pair.slice_id.clone(),
        parent_slice_id: pair.slice_id.clone(),
    })
}

/// Build the (reconstructed CT, reconstructed PET) training pairs the PCAE
/// autoencoder learns from.
pub fn pca_reconstruction_pairs(pairs: &[&SlicePair], k: usize) -> Result<Vec<(Grid, Grid)>> {
    pairs
        .iter()
        .map(|p| Ok((pca_pass(&p.ct, k)?, pca_pass(&p.pet, k)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn phantom_pairs(n_canc: usize, n_heal: usize) -> Vec<SlicePair> {
        generate_phantom(&PhantomConfig {
            seed: 99,
            num_cancerous: n_canc,
            num_healthy: n_heal,
            image_size: 32,
            lesion_radius_range: (3.0, 6.0),
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn mean_of_identical_inputs_is_identity() {
        let mut pair = phantom_pairs(1, 0).remove(0);
        pair.pet = pair.ct.clone();
        let fused = fuse(&pair, FusionStrategy::Mean, &mut FusionModels::none()).unwrap();
        for (a, b) in fused.image.iter().zip(pair.ct.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(fused.strategy, FusionStrategy::Mean);
        assert_eq!(fused.parent_slice_id, pair.slice_id);
    }

    #[test]
    fn max_keeps_hotspot_over_dark_ct() {
        let mut pair = phantom_pairs(1, 0).remove(0);
        pair.ct.fill(0.0);
        pair.pet.fill(0.0);
        pair.pet[[10, 12]] = 1.0;
        let fused = fuse(&pair, FusionStrategy::Max, &mut FusionModels::none()).unwrap();
        assert_eq!(fused.image[[10, 12]], 1.0);
        assert_eq!(fused.image[[0, 0]], 0.0);
    }

    #[test]
    fn pcae_output_in_range_and_shape() {
        let pairs = phantom_pairs(4, 4);
        let refs: Vec<&SlicePair> = pairs.iter().collect();
        let k = 8;
        let train = pca_reconstruction_pairs(&refs, k).unwrap();
        let ae = train_autoencoder(
            &train,
            &AutoencoderSpec::default(),
            &AeTrainOptions {
                epochs: 2,
                batch_size: 4,
                learning_rate: 1e-3,
                decay: 1e-8,
                seed: 1,
                target: AeTarget::Max,
            },
        )
        .unwrap();
        let mut models = FusionModels::with_autoencoder(ae, k);
        let fused = fuse(&pairs[0], FusionStrategy::Pcae, &mut models).unwrap();
        assert_eq!(fused.image.dim(), (32, 32));
        for v in fused.image.iter() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn missing_autoencoder_is_config_error() {
        let pair = phantom_pairs(1, 0).remove(0);
        let mut models = FusionModels::none();
        assert!(matches!(
            fuse(&pair, FusionStrategy::Pcae, &mut models),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            fuse(&pair, FusionStrategy::AeOnly, &mut models),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pca_only_stays_in_range() {
        let pairs = phantom_pairs(2, 2);
        for p in &pairs {
            let fused = fuse(p, FusionStrategy::PcaOnly, &mut FusionModels::none()).unwrap();
            for v in fused.image.iter() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in FusionStrategy::all() {
            let parsed: FusionStrategy = s.name().parse().unwrap();
            assert_eq!(parsed, s);
        }
        assert!("gsf".parse::<FusionStrategy>().is_err());
    }
}
