//! Mask-and-residual encoder with an image decoder. The segmentor's residual
//! head supplies the appearance code; the decoder rebuilds `x'` from
//! `(mask, code)` so test-time training can add a reconstruction term.

use crate::datagen::DataSplit;
use crate::error::{Error, Result};
use crate::losses::{mae_reconstruction, LossValue};
use crate::nets::{Adaptor, Decoder, Discriminator, ModelBundle, PipelineForward, Segmentor};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::train::{fit, TrainConfig, TrainHistory};

/// Appearance code at `1/factor` of the image resolution.
pub type Residual<T> = Tensor<T>;

/// A bundle known to carry the residual head and the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalBundle<T>(ModelBundle<T>);

impl<T: Real> CausalBundle<T> {
    pub fn new(bundle: ModelBundle<T>) -> Result<Self> {
        if !bundle.is_causal() {
            return Err(Error::config("bundle has no residual head or decoder; build it with causal = true"));
        }
        Ok(Self(bundle))
    }

    pub fn adaptor(&self) -> &Adaptor<T> {
        &self.0.adaptor
    }
    pub fn encoder(&self) -> &Segmentor<T> {
        &self.0.segmentor
    }
    pub fn decoder(&self) -> &Decoder<T> {
        self.0.decoder.as_ref().expect("checked at construction")
    }
    pub fn discriminator(&self) -> &Discriminator<T> {
        &self.0.discriminator
    }
    pub fn bundle(&self) -> &ModelBundle<T> {
        &self.0
    }
    pub fn into_inner(self) -> ModelBundle<T> {
        self.0
    }
}

/// Inference-mode `(probabilities, residual)` for a `[n, 1, h, w]` batch of adapted images.
pub fn encoder_forward<T: Real>(bundle: &CausalBundle<T>, x_prime: &Tensor<T>) -> (Tensor<T>, Residual<T>) {
    let (seg, _) = bundle.encoder().forward(x_prime, false);
    (seg.probs, seg.residual.expect("causal encoder has a residual head"))
}

pub fn decoder_forward<T: Real>(bundle: &CausalBundle<T>, mask: &Tensor<T>, r: &Residual<T>) -> Result<Tensor<T>> {
    let d = bundle.decoder();
    let factor = d.factor;
    if mask.c() != d.classes || r.c() != d.residual_channels || r.n() != mask.n() || r.h() * factor != mask.h() || r.w() * factor != mask.w() {
        return Err(Error::Shape(format!("mask {:?} and residual {:?} do not fit the decoder", mask.shape(), r.shape())));
    }
    Ok(d.forward(mask, r).0)
}

/// Gradients of the reconstruction loss on a pipeline pass.
pub struct ReconstructionGrads<T> {
    pub loss: LossValue<T>,
    pub dprobs: Tensor<T>,
    pub dresidual: Tensor<T>,
    /// Gradient on `x'` through the target side of the loss.
    pub dadapted: Tensor<T>,
}

/// `mean|x' − dec(ỹ, R)|` for a pass, with gradients on every input; decoder
/// parameter gradients accumulate when `decoder_grads`.
pub fn reconstruction_backward<T: Real>(decoder: &mut Decoder<T>, fwd: &PipelineForward<T>, decoder_grads: bool) -> Result<ReconstructionGrads<T>> {
    let r = fwd.seg.residual.as_ref().ok_or_else(|| Error::config("model has no residual head"))?;
    reconstruction_grads(decoder, &fwd.adapted, &fwd.seg.probs, r, decoder_grads)
}

/// [`reconstruction_backward`] on explicit tensors.
pub fn reconstruction_grads<T: Real>(
    decoder: &mut Decoder<T>,
    adapted: &Tensor<T>,
    probs: &Tensor<T>,
    residual: &Residual<T>,
    decoder_grads: bool,
) -> Result<ReconstructionGrads<T>> {
    let (rec, cache) = decoder.forward(probs, residual);
    let (loss, dadapted, drec) = mae_reconstruction(adapted, &rec)?;
    let (dprobs, dresidual) = decoder.backward(&cache, &drec, decoder_grads);
    Ok(ReconstructionGrads { loss, dprobs, dresidual, dadapted })
}

/// Trains a causal bundle with the supervised, adversarial and reconstruction
/// objectives (the adversarial generator step carries the reconstruction term).
pub fn fit_causal<T: Real>(bundle: CausalBundle<T>, split: &DataSplit<T>, config: &TrainConfig) -> Result<(CausalBundle<T>, TrainHistory)> {
    let (b, h) = fit(bundle.into_inner(), split, config)?;
    Ok((CausalBundle(b), h))
}
