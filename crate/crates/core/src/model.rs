//! Encoder + decoder assembled over one parameter store.

use crate::config::MitConfig;
use crate::decoder::{decoder_param_specs, AllMlpDecoder, DecoderOutput};
use crate::encoder::{encoder_forward, encoder_param_specs, FeaturePyramid};
use crate::error::{Error, Result};
use crate::kernels::{Tape, Var};
use crate::params::{Bound, ParamSpec, ParamStore};
use crate::tensor::{Float, Tensor};

/// Every parameter of the full network, encoder first.
pub fn param_specs(cfg: &MitConfig) -> Vec<ParamSpec> {
    let mut specs = encoder_param_specs(cfg);
    specs.extend(decoder_param_specs(cfg));
    specs
}

#[derive(Debug, Clone)]
pub struct SegFormer<T: Float = f32> {
    pub config: MitConfig,
    pub params: ParamStore<T>,
}

/// Result of one forward pass on a tape.
pub struct Forward<T: Float> {
    pub bound: Bound<T>,
    pub pyramid: FeaturePyramid<T>,
    /// `[B, N_cls, H/4, W/4]`.
    pub logits: Var<T>,
    pub fused: Var<T>,
}

impl SegFormer<f32> {
    /// Fresh model with seeded initialization.
    pub fn build(config: MitConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let params = ParamStore::initialize(&param_specs(&config), seed);
        Ok(Self { config, params })
    }
}

impl<T: Float> SegFormer<T> {
    /// Wrap an existing store, checking every expected tensor is present with the right shape.
    pub fn from_params(config: MitConfig, params: ParamStore<T>) -> Result<Self> {
        config.check()?;
        let specs = param_specs(&config);
        for spec in &specs {
            match params.get(&spec.name) {
                None => return Err(Error::Config(format!("missing parameter `{}`", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                _ => {}
            }
        }
        if params.len() != specs.len() {
            return Err(Error::Config(format!("store has {} tensors, config expects {}", params.len(), specs.len())));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Float>(&self) -> SegFormer<U> {
        SegFormer {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn encoder_params(&self) -> usize {
        self.params.count_prefix("enc.")
    }

    pub fn decoder_params(&self) -> usize {
        self.params.count_prefix("dec.")
    }

    /// Bind parameters and run encoder + decoder on `x` (`[B, 3, H, W]`).
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, train: bool) -> Result<Forward<T>> {
        let bound = self.params.bind(tape, train);
        let pyramid = encoder_forward(&self.config, &bound, tape, x)?;
        let DecoderOutput { logits, fused } = AllMlpDecoder::from_bound(&bound)?.decode_full(tape, &pyramid)?;
        Ok(Forward {
            bound,
            pyramid,
            logits,
            fused,
        })
    }

    /// Inference logits at 1/4 resolution.
    pub fn predict_logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        Ok(self.forward(&mut tape, &x, false)?.logits.value().clone())
    }
}
