//! Convolutional autoencoder that decodes a fused single-channel image from
//! a two-channel (CT, PET) stack. Encoder: three conv + 2x2 max-pool stages.
//! Decoder: two upsample + conv stages (factors 2 then 4, restoring the
//! input size for any side divisible by 8) and a sigmoid output convolution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, fit, FitOptions, FitTarget, LayerSpec, Network, NetworkSpec, Tensor,
};
use crate::Grid;

/// Reconstruction target for autoencoder training: the pixel-wise maximum
/// (default: keeps CT structure and PET hotspots) or mean of the two inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AeTarget {
    #[default]
    Max,
    Mean,
}

/// Architecture parameters for the fusion autoencoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    /// Input channel count (2: reconstructed CT + reconstructed PET).
    pub in_channels: usize,
    /// Channel widths of the three encoder stages; the last is the
    /// bottleneck width.
    pub encoder_channels: [usize; 3],
    /// Channel widths of the two decoder stages.
    pub decoder_channels: [usize; 2],
    /// Convolution kernel size (odd).
    pub kernel: usize,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        AutoencoderSpec {
            in_channels: 2,
            encoder_channels: [16, 32, 64],
            decoder_channels: [32, 16],
            kernel: 3,
        }
    }
}

impl AutoencoderSpec {
    pub fn bottleneck_channels(&self) -> usize {
        self.encoder_channels[2]
    }

    /// Lower to the generic layer stack. Three pooling stages shrink the
    /// input by 8x; the two decoder upsamples (2x, then 4x) restore it.
    pub fn to_network_spec(&self) -> NetworkSpec {
        let k = self.kernel;
        let [e1, e2, e3] = self.encoder_channels;
        let [d1, d2] = self.decoder_channels;
        NetworkSpec {
            layers: vec![
                LayerSpec::Conv { in_channels: self.in_channels, out_channels: e1, kernel: k },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Conv { in_channels: e1, out_channels: e2, kernel: k },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Conv { in_channels: e2, out_channels: e3, kernel: k },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Upsample { factor: 2 },
                LayerSpec::Conv { in_channels: e3, out_channels: d1, kernel: k },
                LayerSpec::Relu,
                LayerSpec::Upsample { factor: 4 },
                LayerSpec::Conv { in_channels: d1, out_channels: d2, kernel: k },
                LayerSpec::Relu,
                LayerSpec::Conv { in_channels: d2, out_channels: 1, kernel: k },
                LayerSpec::Sigmoid,
            ],
        }
    }
}

/// Training options for the autoencoder; optimizer settings mirror the
/// classifier defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AeTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub decay: f32,
    pub seed: u64,
    pub target: AeTarget,
}

impl Default for AeTrainOptions {
    fn default() -> Self {
        AeTrainOptions {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-5,
            decay: 1e-8,
            seed: 0,
            target: AeTarget::Max,
        }
    }
}

/// A trained fusion autoencoder plus its training trace.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    spec: AutoencoderSpec,
    net: Network,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f32>,
    pub initial_loss: f32,
    pub final_loss: f32,
}

impl Autoencoder {
    pub fn spec(&self) -> &AutoencoderSpec {
        &self.spec
    }

    /// Decode the fused image for one modality pair.
    pub fn decode(&mut self, a: &Grid, b: &Grid) -> Result<Grid> {
        if a.dim() != b.dim() {
            return Err(Error::Data(format!(
                "modality shapes differ: {:?} vs {:?}",
                a.dim(),
                b.dim()
            )));
        }
        check_size(a.dim())?;
        let x = stack_pair(a, b);
        let y = self.net.forward(&x, false)?;
        let (_, _, h, w) = y.dim();
        Ok(Grid::from_shape_fn((h, w), |(i, j)| y[[0, 0, i, j]]))
    }

    /// Batched forward over pre-stacked input tensors (inference only).
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x, false)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        nn::save_network(&self.net, dir)?;
        let head = serde_json::to_string_pretty(&AeCheckpointHead {
            spec: self.spec.clone(),
            loss_history: self.loss_history.clone(),
            initial_loss: self.initial_loss,
            final_loss: self.final_loss,
        })
        .map_err(|e| Error::Format(format!("autoencoder head: {e}")))?;
        std::fs::write(dir.join("autoencoder.json"), head)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Autoencoder> {
        let text = std::fs::read_to_string(dir.join("autoencoder.json"))?;
        let head: AeCheckpointHead = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("autoencoder head: {e}")))?;
        let net = nn::load_network(dir)?;
        if net.spec() != &head.spec.to_network_spec() {
            return Err(Error::Format(
                "autoencoder checkpoint does not match its architecture record".into(),
            ));
        }
        Ok(Autoencoder {
            spec: head.spec,
            net,
            loss_history: head.loss_history,
            initial_loss: head.initial_loss,
            final_loss: head.final_loss,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AeCheckpointHead {
    spec: AutoencoderSpec,
    loss_history: Vec<f32>,
    initial_loss: f32,
    final_loss: f32,
}

fn check_size((h, w): (usize, usize)) -> Result<()> {
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::Data(format!(
            "autoencoder input size {h}x{w} must be a positive multiple of 8"
        )));
    }
    Ok(())
}

fn stack_pair(a: &Grid, b: &Grid) -> Tensor {
    let (h, w) = a.dim();
    let mut x = Tensor::zeros((1, 2, h, w));
    for i in 0..h {
        for j in 0..w {
            x[[0, 0, i, j]] = a[[i, j]];
            x[[0, 1, i, j]] = b[[i, j]];
        }
    }
    x
}

/// Stack modality pairs into the (N, 2, H, W) training tensor and build the
/// per-pixel fusion target.
fn build_training_tensors(
    pairs: &[(Grid, Grid)],
    target: AeTarget,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = pairs[0].0.dim();
    let n = pairs.len();
    let mut x = Tensor::zeros((n, 2, h, w));
    let mut t = Tensor::zeros((n, 1, h, w));
    for (idx, (a, b)) in pairs.iter().enumerate() {
        if a.dim() != (h, w) || b.dim() != (h, w) {
            return Err(Error::Data(
                "autoencoder training pairs must share one shape".into(),
            ));
        }
        for i in 0..h {
            for j in 0..w {
                let av = a[[i, j]];
                let bv = b[[i, j]];
                x[[idx, 0, i, j]] = av;
                x[[idx, 1, i, j]] = bv;
                t[[idx, 0, i, j]] = match target {
                    AeTarget::Max => av.max(bv),
                    AeTarget::Mean => 0.5 * (av + bv),
                };
            }
        }
    }
    Ok((x, t))
}

/// Train the fusion autoencoder on modality pairs. Fails with a training
/// error when the final epoch loss is not strictly below the initial loss,
/// and with a divergence error when the loss goes non-finite.
pub fn train_autoencoder(
    pairs: &[(Grid, Grid)],
    spec: &AutoencoderSpec,
    opts: &AeTrainOptions,
) -> Result<Autoencoder> {
    if pairs.is_empty() {
        return Err(Error::Data("autoencoder training set is empty".into()));
    }
    check_size(pairs[0].0.dim())?;
    let (x, t) = build_training_tensors(pairs, opts.target)?;
    let mut net = Network::new(spec.to_network_spec(), opts.seed)?;

    let initial_loss = {
        let out = net.forward(&x, false)?;
        nn::mse(&out, &t)?.0
    };
    let history = fit(
        &mut net,
        &x,
        FitTarget::Tensor(&t),
        &FitOptions {
            epochs: opts.epochs,
            batch_size: opts.batch_size,
            adam: nn::AdamOptions::with_lr(opts.learning_rate, opts.decay),
            shuffle_seed: opts.seed ^ 0x5eed_ae00,
            patience: None,
        },
    )?;
    let final_loss = {
        let out = net.forward(&x, false)?;
        nn::mse(&out, &t)?.0
    };
    if !(final_loss < initial_loss) {
        return Err(Error::Training(format!(
            "autoencoder made no progress: initial {initial_loss}, final {final_loss}"
        )));
    }
    Ok(Autoencoder {
        spec: spec.clone(),
        net,
        loss_history: history,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pairs(n: usize, size: usize, seed: u64) -> Vec<(Grid, Grid)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a = Grid::from_shape_fn((size, size), |_| rng.random_range(0.0..1.0f32));
                let b = Grid::from_shape_fn((size, size), |_| rng.random_range(0.0..1.0f32));
                (a, b)
            })
            .collect()
    }

    fn quick_opts(seed: u64) -> AeTrainOptions {
        AeTrainOptions {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-3,
            decay: 1e-8,
            seed,
            target: AeTarget::Max,
        }
    }

    #[test]
    fn training_reduces_loss() {
        let pairs = random_pairs(8, 16, 1);
        let ae = train_autoencoder(&pairs, &AutoencoderSpec::default(), &quick_opts(7)).unwrap();
        assert!(ae.final_loss < ae.initial_loss);
        assert_eq!(ae.loss_history.len(), 3);
    }

    #[test]
    fn zero_inputs_reach_near_zero_loss() {
        // all-zero pairs: only the output bias carries gradient, pushing the
        // sigmoid toward 0; use steps large enough to travel there
        let pairs: Vec<(Grid, Grid)> =
            (0..4).map(|_| (Grid::zeros((16, 16)), Grid::zeros((16, 16)))).collect();
        let mut opts = quick_opts(3);
        opts.epochs = 60;
        opts.batch_size = 2;
        opts.learning_rate = 0.05;
        let ae = train_autoencoder(&pairs, &AutoencoderSpec::default(), &opts).unwrap();
        assert!(
            ae.final_loss < 0.01,
            "loss should approach zero, got {}",
            ae.final_loss
        );
        let mut ae = ae;
        let out = ae.decode(&Grid::zeros((16, 16)), &Grid::zeros((16, 16))).unwrap();
        let mean: f32 = out.iter().sum::<f32>() / out.len() as f32;
        assert!(mean < 0.12, "output should be near zero, mean {mean}");
    }

    #[test]
    fn fixed_seed_reproduces_loss_trajectory() {
        let pairs = random_pairs(6, 16, 9);
        let spec = AutoencoderSpec::default();
        let a = train_autoencoder(&pairs, &spec, &quick_opts(11)).unwrap();
        let b = train_autoencoder(&pairs, &spec, &quick_opts(11)).unwrap();
        for (x, y) in a.loss_history.iter().zip(b.loss_history.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(a.final_loss, b.final_loss);
    }

    #[test]
    fn output_shape_equals_input_shape_for_multiples_of_8() {
        let pairs = random_pairs(2, 16, 5);
        let mut ae =
            train_autoencoder(&pairs, &AutoencoderSpec::default(), &quick_opts(2)).unwrap();
        for size in [8usize, 16, 24, 40] {
            let a = Grid::from_elem((size, size), 0.3f32);
            let b = Grid::from_elem((size, size), 0.6f32);
            let out = ae.decode(&a, &b).unwrap();
            assert_eq!(out.dim(), (size, size), "size {size}");
        }
    }

    #[test]
    fn non_multiple_of_8_is_rejected() {
        let pairs = random_pairs(2, 16, 5);
        let mut ae =
            train_autoencoder(&pairs, &AutoencoderSpec::default(), &quick_opts(2)).unwrap();
        let a = Grid::zeros((20, 20));
        assert!(matches!(ae.decode(&a, &a), Err(Error::Data(_))));
        let bad = vec![(Grid::zeros((20, 20)), Grid::zeros((20, 20)))];
        assert!(matches!(
            train_autoencoder(&bad, &AutoencoderSpec::default(), &quick_opts(2)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = random_pairs(4, 16, 21);
        let mut ae =
            train_autoencoder(&pairs, &AutoencoderSpec::default(), &quick_opts(4)).unwrap();
        ae.save(dir.path()).unwrap();
        let mut back = Autoencoder::load(dir.path()).unwrap();
        let (a, b) = &pairs[0];
        assert_eq!(ae.decode(a, b).unwrap(), back.decode(a, b).unwrap());
        assert_eq!(ae.spec(), back.spec());
    }
}
