use crate::error::{Error, Result};
use crate::init::CrcRng;
use crate::layers::{self, Conv, ConvVars, Params};
use crate::numerics::{Tape, Tensor, Var};

use super::config::{TrainConfig, ENCODER_LAYERS};

/// Five 3x3 convolutions with ReLU, mapping a stacked clip
/// `[H0, W0, T·C_in]` to features `[H0/s, W0/s, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    pub layers: Vec<Conv>,
}

impl ExtractorParams {
    pub fn new(cfg: &TrainConfig, rng: &mut CrcRng) -> Result<Self> {
        cfg.validate()?;
        let strides = cfg.encoder_strides();
        let mut inputs = cfg.clip_channels();
        let mut layers = Vec::with_capacity(ENCODER_LAYERS);
        for (&outputs, &stride) in cfg.encoder_channels.iter().zip(&strides) {
            layers.push(Conv::new(3, inputs, outputs, stride, rng));
            inputs = outputs;
        }
        Ok(Self { layers })
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].inputs()
    }
}

impl Params for ExtractorParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Params::tensors).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Params::tensors_mut).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ExtractorVars {
    layers: Vec<ConvVars>,
}

impl ExtractorVars {
    pub fn bind(params: &ExtractorParams, it: &mut impl Iterator<Item = Var>) -> Self {
        Self {
            layers: params.layers.iter().map(|l| ConvVars::bind(l, it)).collect(),
        }
    }

    /// Without `final_relu` the last layer is linear, so features are signed.
    pub fn forward(&self, tape: &mut Tape, clip: Var, final_relu: bool) -> Result<Var> {
        let mut h = clip;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(tape, h)?;
            h = if i < last || final_relu { tape.relu(y) } else { y };
        }
        Ok(h)
    }
}

/// Checks a stacked clip against the configured geometry.
pub fn check_clip(clip: &Tensor, cfg: &TrainConfig) -> Result<()> {
    let want = [cfg.height, cfg.width, cfg.clip_channels()];
    if clip.shape() != want {
        return Err(Error::dim(
            "extract",
            format!("clip has shape {:?}, config expects {want:?}", clip.shape()),
        ));
    }
    Ok(())
}

/// Feature map of one stacked clip.
pub fn extract(clip: &Tensor, params: &ExtractorParams, cfg: &TrainConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_clip(clip, cfg)?;
    let mut tape = Tape::new();
    let vars = ExtractorVars::bind(params, &mut layers::record(&mut tape, params, false).into_iter());
    let x = tape.constant(clip.clone());
    let f = vars.forward(&mut tape, x, cfg.final_relu)?;
    Ok(tape.value(f).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng_from_seed;
    use crate::training::config::Profile;

    #[test]
    fn zero_clip_gives_zero_features() {
        let cfg = TrainConfig::profile(Profile::Tiny);
        let params = ExtractorParams::new(&cfg, &mut rng_from_seed(0)).unwrap();
        let clip = Tensor::zeros([16, 16, 4]);
        let f = extract(&clip, &params, &cfg).unwrap();
        assert_eq!(f.shape(), &[2, 2, 8]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_for_64_pixels() {
        let cfg = TrainConfig {
            height: 64,
            width: 64,
            encoder_channels: [2, 2, 2, 2, 6],
            factors: 4,
            ..TrainConfig::profile(Profile::Ped2Like)
        };
        let params = ExtractorParams::new(&cfg, &mut rng_from_seed(1)).unwrap();
        let clip = Tensor::full([64, 64, 4], 0.5);
        let f = extract(&clip, &params, &cfg).unwrap();
        assert_eq!(f.shape(), &[2, 2, 6]);
    }

    #[test]
    fn indivisible_frames_are_a_config_error() {
        let cfg = TrainConfig {
            height: 60,
            ..TrainConfig::profile(Profile::Tiny)
        };
        assert!(matches!(
            ExtractorParams::new(&cfg, &mut rng_from_seed(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn seeded_replay_is_bit_identical() {
        let cfg = TrainConfig::profile(Profile::Tiny);
        let run = || {
            let mut rng = rng_from_seed(9);
            let params = ExtractorParams::new(&cfg, &mut rng).unwrap();
            let clip = crate::init::uniform(&[16, 16, 4], 0.0, 1.0, &mut rng);
            extract(&clip, &params, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.data().len(), 32);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
