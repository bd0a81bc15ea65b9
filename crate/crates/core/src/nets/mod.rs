//! Adaptor, segmentor, discriminator and the causal decoder.

mod adaptor;
mod decoder;
mod discriminator;
mod unet;

pub use adaptor::{Adaptor, AdaptorCache};
pub use decoder::{Decoder, DecoderCache};
pub use discriminator::{Discriminator, DiscriminatorCache, DISCRIMINATOR_WIDTHS};
pub use unet::{ConvBlock, Segmentation, Segmentor, SegmentorCache};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Real;
use crate::seed;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Architecture of every network in a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub n_classes: usize,
    pub adaptor_width: usize,
    pub unet_depth: usize,
    pub unet_width: usize,
    pub disc_widths: Vec<usize>,
    /// Spectral normalization + tanh in the discriminator.
    pub smoothness: bool,
    /// When false the adaptor is bypassed (`x' = x`).
    pub use_adaptor: bool,
    /// Adds the residual head and the reconstruction decoder.
    pub causal: bool,
    pub residual_channels: usize,
    pub decoder_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_classes: 4,
            adaptor_width: 16,
            unet_depth: 3,
            unet_width: 16,
            disc_widths: DISCRIMINATOR_WIDTHS.to_vec(),
            smoothness: true,
            use_adaptor: true,
            causal: false,
            residual_channels: 8,
            decoder_width: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be at least 2"));
        }
        if self.n_classes > 255 {
            return Err(Error::config("n_classes must fit in 8-bit label maps"));
        }
        if self.unet_depth == 0 || self.unet_width == 0 || self.adaptor_width == 0 {
            return Err(Error::config("network depth and widths must be positive"));
        }
        let factor = 1usize << (self.unet_depth - 1);
        if self.image_size < factor || self.image_size % factor != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a multiple of {factor} for a depth-{} UNet",
                self.image_size, self.unet_depth
            )));
        }
        if self.disc_widths.len() != 5 || self.disc_widths.contains(&0) {
            return Err(Error::config("the discriminator has exactly five non-empty convolution layers"));
        }
        // 4×4 kernels, padding 1: two halvings then three shrink-by-one layers
        if self.image_size / 4 < 4 {
            return Err(Error::config("image_size too small for the discriminator"));
        }
        if self.causal && (self.residual_channels == 0 || self.decoder_width == 0) {
            return Err(Error::config("causal models need residual channels and a decoder width"));
        }
        Ok(())
    }
}

/// Every parameter set of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub seed: u64,
    pub adaptor: Adaptor<T>,
    pub segmentor: Segmentor<T>,
    pub discriminator: Discriminator<T>,
    /// Present for causal models; the segmentor then carries a residual head.
    pub decoder: Option<Decoder<T>>,
}

/// Builds all networks deterministically from `seed`.
pub fn init_models<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelBundle<T>> {
    config.validate()?;
    let s = config.image_size;
    let adaptor = Adaptor::new(config.adaptor_width, &mut seed::rng_for(seed, "init/adaptor"));
    let segmentor = Segmentor::new(
        config.unet_depth,
        config.unet_width,
        config.n_classes,
        config.causal.then_some(config.residual_channels),
        &mut seed::rng_for(seed, "init/segmentor"),
    );
    let discriminator = Discriminator::new(
        config.n_classes,
        s,
        s,
        &config.disc_widths,
        config.smoothness,
        &mut seed::rng_for(seed, "init/discriminator"),
    );
    let decoder = config.causal.then(|| {
        Decoder::new(
            config.n_classes,
            config.residual_channels,
            config.decoder_width,
            segmentor.bottleneck_factor(),
            &mut seed::rng_for(seed, "init/decoder"),
        )
    });
    Ok(ModelBundle { config: config.clone(), seed, adaptor, segmentor, discriminator, decoder })
}

/// Activations of one adaptor → segmentor pass.
#[derive(Clone, Debug)]
pub struct PipelineForward<T> {
    /// `x' = Ω(x)`, or `x` when the adaptor is bypassed.
    pub adapted: Tensor<T>,
    pub seg: Segmentation<T>,
    adaptor_cache: Option<AdaptorCache<T>>,
    seg_cache: SegmentorCache<T>,
}

impl<T: Real> PipelineForward<T> {
    /// Folds the batch statistics of a training-mode pass into `segmentor`.
    pub fn commit_batch_stats(&self, segmentor: &mut Segmentor<T>) {
        segmentor.commit_batch_stats(&self.seg_cache);
    }
}

pub fn pipeline_forward<T: Real>(adaptor: Option<&Adaptor<T>>, segmentor: &Segmentor<T>, x: &Tensor<T>, train: bool) -> PipelineForward<T> {
    let (adapted, adaptor_cache) = match adaptor {
        Some(a) => {
            let (y, c) = a.forward(x);
            (y, Some(c))
        }
        None => (x.clone(), None),
    };
    let (seg, seg_cache) = segmentor.forward(&adapted, train);
    PipelineForward { adapted, seg, adaptor_cache, seg_cache }
}

/// Backpropagates gradients on the probabilities, the residual code and
/// (directly) on `x'`. Segmentor parameter gradients accumulate only when
/// `segmentor_grads`; adaptor gradients accumulate whenever an adaptor is given.
pub fn pipeline_backward<T: Real>(
    adaptor: Option<&mut Adaptor<T>>,
    segmentor: &mut Segmentor<T>,
    fwd: &PipelineForward<T>,
    dprobs: &Tensor<T>,
    dresidual: Option<&Tensor<T>>,
    dadapted: Option<&Tensor<T>>,
    segmentor_grads: bool,
) {
    let need_input_grad = adaptor.is_some();
    if !need_input_grad && !segmentor_grads {
        return;
    }
    let mut dx = segmentor.backward(&fwd.seg_cache, dprobs, dresidual, segmentor_grads);
    if let Some(extra) = dadapted {
        dx.add_assign(extra);
    }
    if let (Some(a), Some(cache)) = (adaptor, fwd.adaptor_cache.as_ref()) {
        a.backward(cache, &dx, true, false);
    }
}

impl<T: Real> ModelBundle<T> {
    pub fn active_adaptor(&self) -> Option<&Adaptor<T>> {
        self.config.use_adaptor.then_some(&self.adaptor)
    }

    /// Inference-mode probabilities for a `[n, 1, h, w]` batch.
    pub fn predict(&self, x: &Tensor<T>) -> Tensor<T> {
        pipeline_forward(self.active_adaptor(), &self.segmentor, x, false).seg.probs
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> PipelineForward<T> {
        pipeline_forward(self.active_adaptor(), &self.segmentor, x, train)
    }

    pub fn is_causal(&self) -> bool {
        self.decoder.is_some() && self.segmentor.residual_head.is_some()
    }

    /// Reconstruction `x̃'` from a pipeline pass (causal bundles only).
    pub fn reconstruct(&self, fwd: &PipelineForward<T>) -> Result<Tensor<T>> {
        let dec = self.decoder.as_ref().ok_or_else(|| Error::config("model has no decoder"))?;
        let r = fwd.seg.residual.as_ref().ok_or_else(|| Error::config("model has no residual head"))?;
        Ok(dec.forward(&fwd.seg.probs, r).0)
    }

    /// Digest of `(adaptor, segmentor incl. batch-norm statistics, discriminator, decoder)`.
    pub fn digests(&self) -> BundleDigests {
        let bn: Vec<_> = self
            .segmentor
            .batch_norms()
            .iter()
            .map(|b| crate::nn::Param::new(b.running_mean.iter().chain(&b.running_var).copied().collect()))
            .collect();
        let seg = crate::nn::digest(self.segmentor.params().into_iter().chain(bn.iter()));
        BundleDigests {
            adaptor: self.adaptor.param_digest(),
            segmentor: seg,
            discriminator: self.discriminator.param_digest(),
            decoder: self.decoder.as_ref().map(|d| d.param_digest()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BundleDigests {
    pub adaptor: u64,
    pub segmentor: u64,
    pub discriminator: u64,
    pub decoder: Option<u64>,
}
