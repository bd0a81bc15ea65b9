//! Alternating semi-supervised GAN training: a supervised step on labelled
//! pairs, then a generator step and a discriminator step on unpaired data.

use crate::causal::reconstruction_backward;
use crate::datagen::{
    augment_batch, corrupt_labels, images_to_tensor, masks_to_tensor, AugmentParams, CorruptionParams, DataSplit, Image,
    Mask, PatientVolume,
};
use crate::error::{Error, Result};
use crate::losses::{
    gradient_penalty, lsgan_discriminator_loss, lsgan_generator_loss, scaled_dynamic_weight, weighted_cross_entropy,
    LossValue, ADV_WEIGHT_FACTOR, GP_LAMBDA,
};
use crate::metrics::{MetricRecord, Phase};
use crate::nets::{pipeline_backward, ModelBundle, ModelConfig};
use crate::nn::{Adam, Module, Param};
use crate::scalar::Real;
use crate::seed;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Which corruptions produce fake anchors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    PatchSwap,
    BinaryNoise,
    Both,
}

impl FromStr for AnchorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch_swap" => Ok(Self::PatchSwap),
            "binary_noise" => Ok(Self::BinaryNoise),
            "both" => Ok(Self::Both),
            _ => Err(Error::config(format!("unknown anchor kind {s:?} (patch_swap, binary_noise, both)"))),
        }
    }
}

impl fmt::Display for AnchorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PatchSwap => "patch_swap",
            Self::BinaryNoise => "binary_noise",
            Self::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub val_patience: usize,
    /// Cap on iterations per epoch; 0 means one pass over the larger pool.
    pub max_iters_per_epoch: usize,
    pub instance_noise_std: f64,
    pub max_rotation: f64,
    pub max_shift_frac: f64,
    pub adv_weight_factor: f64,
    pub gp_lambda: f64,
    pub corrupted_fraction: f64,
    pub patch_frac: f64,
    pub flip_prob: f64,
    pub n_swaps: usize,
    pub anchor_kind: AnchorKind,
    pub seed: u64,
    pub use_adaptor: bool,
    pub use_smoothness: bool,
    pub use_fake_anchors: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentParams::default();
        let cor = CorruptionParams::default();
        Self {
            learning_rate: 1e-4,
            batch_size: 12,
            max_epochs: 100,
            val_patience: 10,
            max_iters_per_epoch: 0,
            instance_noise_std: aug.noise_std,
            max_rotation: aug.max_rot,
            max_shift_frac: aug.max_shift_frac,
            adv_weight_factor: ADV_WEIGHT_FACTOR,
            gp_lambda: GP_LAMBDA,
            corrupted_fraction: 0.5,
            patch_frac: cor.patch_frac,
            flip_prob: cor.flip_prob,
            n_swaps: cor.n_swaps,
            anchor_kind: AnchorKind::Both,
            seed: 0,
            use_adaptor: true,
            use_smoothness: true,
            use_fake_anchors: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("learning_rate", self.learning_rate), ("adv_weight_factor", self.adv_weight_factor)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.val_patience == 0 {
            return Err(Error::config("batch_size, max_epochs and val_patience must be positive"));
        }
        let non_negative = [
            ("instance_noise_std", self.instance_noise_std),
            ("max_rotation", self.max_rotation),
            ("max_shift_frac", self.max_shift_frac),
            ("gp_lambda", self.gp_lambda),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.corrupted_fraction) {
            return Err(Error::config(format!("corrupted_fraction must lie in [0, 1], got {}", self.corrupted_fraction)));
        }
        if !(self.patch_frac > 0.0 && self.patch_frac < 1.0) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("patch_frac must lie in (0, 1) and flip_prob in [0, 1]"));
        }
        Ok(())
    }

    /// Copies the architectural toggles into a model configuration.
    pub fn apply_toggles(&self, model: &mut ModelConfig) {
        model.use_adaptor = self.use_adaptor;
        model.smoothness = self.use_smoothness;
    }

    /// Gradient-penalty weight in force (zero without smoothness constraints).
    pub fn effective_gp_lambda(&self) -> f64 {
        if self.use_smoothness {
            self.gp_lambda
        } else {
            0.0
        }
    }

    pub fn augment_params(&self) -> AugmentParams {
        AugmentParams { noise_std: self.instance_noise_std, max_rot: self.max_rotation, max_shift_frac: self.max_shift_frac }
    }

    pub fn corruption_params(&self) -> CorruptionParams {
        let base = CorruptionParams { patch_frac: self.patch_frac, flip_prob: self.flip_prob, n_swaps: self.n_swaps };
        match self.anchor_kind {
            AnchorKind::Both => base,
            AnchorKind::PatchSwap => CorruptionParams { flip_prob: 0.0, ..base },
            AnchorKind::BinaryNoise => CorruptionParams { n_swaps: 0, ..base },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistorySplit {
    Train,
    Val,
}

impl HistorySplit {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
        }
    }
}

/// Loss names used in [`TrainHistory`].
pub mod names {
    pub const SUPERVISED: &str = "supervised";
    /// `mean (d − 1)²` on real masks.
    pub const DISC_REAL: &str = "disc_real";
    /// `mean (d + 1)²` on fake masks.
    pub const DISC_FAKE: &str = "disc_fake";
    pub const GRADIENT_PENALTY: &str = "gradient_penalty";
    pub const GENERATOR: &str = "generator";
    pub const DYNAMIC_WEIGHT: &str = "dynamic_weight";
    pub const RECONSTRUCTION: &str = "reconstruction";
    /// Mean foreground Dice of the predictions.
    pub const DICE: &str = "dice";
    /// Mean score of clean masks minus mean score of their corruptions.
    pub const ANCHOR_GAP: &str = "anchor_gap";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub split: HistorySplit,
    pub loss_name: String,
    pub value: f64,
}

/// Per-epoch loss records. Discriminator terms are stored per label as the
/// full mean squared error, so a critic stuck at 0 reads 1.0 on both.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, epoch: usize, split: HistorySplit, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::contract(format!("non-finite {name} at epoch {epoch}")));
        }
        if self.records.last().is_some_and(|r| r.epoch > epoch) {
            return Err(Error::contract("history epochs must not decrease"));
        }
        self.records.push(HistoryRecord { epoch, split, loss_name: name.to_owned(), value });
        Ok(())
    }

    /// Values of one series in epoch order.
    pub fn series(&self, split: HistorySplit, name: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == split && r.loss_name == name).map(|r| r.value).collect()
    }

    pub fn n_epochs(&self) -> usize {
        let mut e: Vec<usize> = self.records.iter().map(|r| r.epoch).collect();
        e.dedup();
        e.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss_name,value\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.split.as_str(), r.loss_name, r.value));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("epoch,split,loss_name,value") {
            return Err(Error::Format("history CSV must start with epoch,split,loss_name,value".into()));
        }
        let mut h = Self::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.trim().split(',').collect();
            let bad = || Error::Format(format!("history CSV line {}: {line:?}", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let split = match f[1] {
                "train" => HistorySplit::Train,
                "val" => HistorySplit::Val,
                _ => return Err(bad()),
            };
            let epoch = f[0].parse().map_err(|_| bad())?;
            let value = f[3].parse().map_err(|_| bad())?;
            h.push(epoch, split, f[2], value).map_err(|e| Error::Format(format!("history CSV line {}: {e}", i + 2)))?;
        }
        Ok(h)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// True iff no new minimum (strictly below every earlier entry) occurred
/// within the last `patience` entries.
pub fn should_stop(val_history: &[f64], patience: usize) -> Result<bool> {
    if patience < 1 {
        return Err(Error::config("patience must be at least 1"));
    }
    if val_history.is_empty() {
        return Err(Error::contract("empty validation history"));
    }
    Ok(val_history.len() - 1 - argmin(val_history) >= patience)
}

/// Index of the first minimum.
fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Losses of one adversarial iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialLosses<T> {
    /// `½·mean d(ỹ)²` before weighting (plus `reconstruction` for causal models).
    pub generator: LossValue<T>,
    /// `real`, `fake` and `gradient_penalty` parts.
    pub discriminator: LossValue<T>,
    pub weight: f64,
}

/// Owns a bundle and the two optimizers.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub bundle: ModelBundle<T>,
    pub config: TrainConfig,
    gen_opt: Adam<T>,
    disc_opt: Adam<T>,
    rng: seed::Rng,
}

fn generator_params<T: Real>(b: &mut ModelBundle<T>) -> Vec<&mut Param<T>> {
    let mut out = Vec::new();
    if b.config.use_adaptor {
        out.extend(b.adaptor.params_mut());
    }
    out.extend(b.segmentor.params_mut());
    if let Some(d) = b.decoder.as_mut() {
        out.extend(d.params_mut());
    }
    out
}

fn zero_generator_grads<T: Real>(b: &mut ModelBundle<T>) {
    for p in generator_params(b) {
        p.zero_grad();
    }
}

fn loss_f64<T: Real>(l: &LossValue<T>) -> f64 {
    l.value.to_f64()
}

/// Corrupts every sample of a one-hot batch.
fn corrupt_batch<T: Real>(masks: &Tensor<T>, params: &CorruptionParams, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let [n, c, h, w] = masks.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(masks.shape());
    for b in 0..n {
        let s = masks.sample(b);
        let mut labels: Vec<u8> = (0..plane)
            .map(|p| (0..c).fold(0, |best, k| if s[k * plane + p] > s[best * plane + p] { k } else { best }) as u8)
            .collect();
        corrupt_labels(&mut labels, h, w, c, params, rng)?;
        let o = out.sample_mut(b);
        for (p, &l) in labels.iter().enumerate() {
            o[l as usize * plane + p] = T::one();
        }
    }
    Ok(out)
}

fn stack_samples<T: Real>(parts: &[(&Tensor<T>, usize)]) -> Result<Tensor<T>> {
    let first = parts.iter().find(|p| p.1 > 0).ok_or_else(|| Error::contract("empty batch"))?.0;
    let mut shape = first.shape();
    shape[0] = parts.iter().map(|p| p.1).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for (t, k) in parts {
        for b in 0..*k {
            data.extend_from_slice(t.sample(b));
        }
    }
    Tensor::from_vec(shape, data)
}

impl<T: Real> Trainer<T> {
    pub fn new(bundle: ModelBundle<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if bundle.config.use_adaptor != config.use_adaptor || bundle.config.smoothness != config.use_smoothness {
            return Err(Error::config("training toggles disagree with the model architecture; build it with apply_toggles"));
        }
        let rng = seed::rng_for(config.seed, "train/discriminator");
        Ok(Self {
            bundle,
            gen_opt: Adam::new(config.learning_rate),
            disc_opt: Adam::new(config.learning_rate),
            rng,
            config,
        })
    }

    /// One Adam step on the adaptor and segmentor minimizing the weighted
    /// cross-entropy of a labelled batch.
    pub fn train_step_supervised(&mut self, images: &Tensor<T>, masks: &Tensor<T>) -> Result<LossValue<T>> {
        if images.n() == 0 || images.n() != masks.n() {
            return Err(Error::contract(format!("{} images vs {} masks in a supervised batch", images.n(), masks.n())));
        }
        let b = &mut self.bundle;
        zero_generator_grads(b);
        let fwd = b.forward(images, true);
        let (loss, dprobs) = weighted_cross_entropy(&fwd.seg.probs, masks)?;
        fwd.commit_batch_stats(&mut b.segmentor);
        let adaptor = b.config.use_adaptor.then_some(&mut b.adaptor);
        pipeline_backward(adaptor, &mut b.segmentor, &fwd, &dprobs, None, None, true);
        self.gen_opt.step(&mut generator_params(b));
        Ok(loss)
    }

    /// Generator step (weighted adversarial loss, plus reconstruction for
    /// causal models) followed by a discriminator step on real masks against
    /// detached predictions mixed with corrupted real masks.
    pub fn train_step_adversarial(&mut self, images: &Tensor<T>, real_masks: &Tensor<T>, supervised_loss: f64) -> Result<AdversarialLosses<T>> {
        if images.n() == 0 || real_masks.n() == 0 {
            return Err(Error::contract("adversarial step needs images and real masks"));
        }
        let (generator, weight, preds) = self.generator_step(images, supervised_loss)?;
        let discriminator = self.discriminator_step(&preds, real_masks)?;
        Ok(AdversarialLosses { generator, discriminator, weight })
    }

    /// Adam step on the generator side; returns the unweighted loss, the
    /// dynamic weight and the (detached) predictions.
    pub fn generator_step(&mut self, images: &Tensor<T>, supervised_loss: f64) -> Result<(LossValue<T>, f64, Tensor<T>)> {
        let b = &mut self.bundle;
        zero_generator_grads(b);
        let fwd = b.forward(images, true);
        fwd.commit_batch_stats(&mut b.segmentor);
        let (d_scores, d_cache) = b.discriminator.forward(&fwd.seg.probs);
        let (gen, g) = lsgan_generator_loss(&d_scores);
        let weight = scaled_dynamic_weight(self.config.adv_weight_factor, supervised_loss, loss_f64(&gen));
        let wt = T::from_f64(weight);
        let scaled: Vec<T> = g.iter().map(|&v| v * wt).collect();
        let (mut dprobs, _) = b.discriminator.gradients(&d_cache, &scaled, false);
        let mut parts = gen.components.clone();
        let (mut dres, mut dadapted) = (None, None);
        if let Some(dec) = b.decoder.as_mut() {
            let rg = reconstruction_backward(dec, &fwd, true)?;
            dprobs.add_assign(&rg.dprobs);
            parts.extend(rg.loss.components);
            dres = Some(rg.dresidual);
            dadapted = Some(rg.dadapted);
        }
        let adaptor = b.config.use_adaptor.then_some(&mut b.adaptor);
        pipeline_backward(adaptor, &mut b.segmentor, &fwd, &dprobs, dres.as_ref(), dadapted.as_ref(), true);
        self.gen_opt.step(&mut generator_params(b));
        Ok((LossValue { value: gen.value, components: parts }, weight, fwd.seg.probs))
    }

    /// Adam step on the discriminator: real masks against predictions, a
    /// `corrupted_fraction` of which is replaced by corrupted real masks;
    /// both batches are augmented.
    pub fn discriminator_step(&mut self, preds: &Tensor<T>, real_masks: &Tensor<T>) -> Result<LossValue<T>> {
        let cfg = &self.config;
        let n = real_masks.n().min(preds.n());
        if n == 0 {
            return Err(Error::contract("discriminator step needs predictions and real masks"));
        }
        let n_corr = if cfg.use_fake_anchors { (cfg.corrupted_fraction * n as f64).round() as usize } else { 0 };
        let fake = if n_corr > 0 {
            let c = corrupt_batch(real_masks, &cfg.corruption_params(), &mut self.rng)?;
            stack_samples(&[(preds, n - n_corr), (&c, n_corr)])?
        } else {
            stack_samples(&[(preds, n)])?
        };
        let real = stack_samples(&[(real_masks, n)])?;
        let aug = cfg.augment_params();
        let real = augment_batch(&real, &aug, &mut self.rng);
        let fake = augment_batch(&fake, &aug, &mut self.rng);
        let lambda = cfg.effective_gp_lambda();
        let disc = &mut self.bundle.discriminator;
        disc.zero_grad();
        disc.power_iterate();
        let (s_real, c_real) = disc.forward(&real);
        let (s_fake, c_fake) = disc.forward(&fake);
        let (dl, g_real, g_fake) = lsgan_discriminator_loss(&s_real, &s_fake);
        disc.backward(&c_real, &g_real, true);
        disc.backward(&c_fake, &g_fake, true);
        let mut parts = dl.components;
        if lambda > 0.0 {
            let gp = gradient_penalty(disc, &real, &fake, lambda, self.rng.random(), true)?;
            parts.extend(gp.components);
        }
        self.disc_opt.step(&mut disc.params_mut());
        Ok(LossValue::from_parts(parts))
    }
}

/// Flattened training pools.
struct Pools<'a, T> {
    labelled: Vec<(&'a Image<T>, &'a Mask<T>)>,
    images: Vec<&'a Image<T>>,
    real_masks: Vec<&'a Mask<T>>,
}

fn pools<T: Real>(split: &DataSplit<T>) -> Result<Pools<'_, T>> {
    let labelled: Vec<_> = split
        .train
        .labelled
        .iter()
        .flat_map(|v| v.slices.iter().filter_map(|s| s.mask.as_ref().map(|m| (&s.image, m))))
        .collect();
    if labelled.is_empty() {
        return Err(Error::contract("no labelled training slices"));
    }
    let images: Vec<_> = split.train.labelled.iter().chain(&split.train.unlabelled).flat_map(|v| v.slices.iter().map(|s| &s.image)).collect();
    let mut real_masks: Vec<&Mask<T>> = split.train.unpaired_masks.iter().collect();
    if real_masks.is_empty() {
        log::warn!("unpaired mask pool is empty; using the labelled masks as real samples");
        real_masks = labelled.iter().map(|p| p.1).collect();
    }
    Ok(Pools { labelled, images, real_masks })
}

/// Endless shuffled index stream over `n` items, reshuffled each pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Validation losses of a bundle in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationLosses {
    pub supervised: f64,
    pub disc_real: f64,
    pub disc_fake: f64,
    pub dice: f64,
    pub anchor_gap: f64,
    pub reconstruction: Option<f64>,
}

/// Inference-mode losses over labelled volumes, batched by `batch`.
pub fn validation_losses<T: Real>(bundle: &ModelBundle<T>, volumes: &[PatientVolume<T>], batch: usize, corruption: &CorruptionParams, seed: u64) -> Result<ValidationLosses> {
    let mut rng = seed::rng_for(seed, "validation/anchors");
    let (mut ce, mut real, mut fake, mut gap_clean, mut gap_corr, mut rec) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut n_total = 0usize;
    let mut dice = Vec::new();
    for v in volumes {
        let masks = v.masks().ok_or_else(|| Error::contract(format!("validation patient {} has no masks", v.patient_id)))?;
        let images = v.images();
        let mut preds: Vec<Mask<T>> = Vec::with_capacity(images.len());
        for start in (0..images.len()).step_by(batch.max(1)) {
            let end = (start + batch).min(images.len());
            let x = images_to_tensor(&images[start..end])?;
            let y = masks_to_tensor(&masks[start..end])?;
            let fwd = bundle.forward(&x, false);
            let k = (end - start) as f64;
            ce += weighted_cross_entropy(&fwd.seg.probs, &y)?.0.value.to_f64() * k;
            let sr = bundle.discriminator.score(&y);
            let sf = bundle.discriminator.score(&fwd.seg.probs);
            real += sr.iter().map(|d| (d.to_f64() - 1.0).powi(2)).sum::<f64>();
            fake += sf.iter().map(|d| (d.to_f64() + 1.0).powi(2)).sum::<f64>();
            let corrupted = corrupt_batch(&y, corruption, &mut rng)?;
            gap_clean += sr.iter().map(|d| d.to_f64()).sum::<f64>();
            gap_corr += bundle.discriminator.score(&corrupted).iter().map(|d| d.to_f64()).sum::<f64>();
            if bundle.is_causal() {
                let r = bundle.reconstruct(&fwd)?;
                rec += fwd.adapted.data().iter().zip(r.data()).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).sum::<f64>()
                    / (x.h() * x.w()) as f64;
            }
            n_total += end - start;
            preds.extend(crate::datagen::SoftMask::from_tensor(&fwd.seg.probs).iter().map(|s| s.harden()));
        }
        let pred_refs: Vec<&Mask<T>> = preds.iter().collect();
        dice.push(MetricRecord::from_slices(&v.patient_id, Phase::Before, &pred_refs, &masks)?.mean_dice());
    }
    if n_total == 0 {
        return Err(Error::contract("empty validation set"));
    }
    let n = n_total as f64;
    Ok(ValidationLosses {
        supervised: ce / n,
        disc_real: real / n,
        disc_fake: fake / n,
        dice: dice.iter().sum::<f64>() / dice.len() as f64,
        anchor_gap: (gap_clean - gap_corr) / n,
        reconstruction: bundle.is_causal().then_some(rec / n),
    })
}

fn diverged(epoch: usize, iteration: usize, what: &str) -> Error {
    Error::Diverged { epoch, iteration, what: what.to_owned() }
}

/// [`fit`] with a hook that receives the last finite bundle and the history
/// so far when training diverges.
pub fn fit_with_snapshot<T: Real>(
    bundle: ModelBundle<T>,
    split: &DataSplit<T>,
    config: &TrainConfig,
    mut on_divergence: impl FnMut(&ModelBundle<T>, &TrainHistory),
) -> Result<(ModelBundle<T>, TrainHistory)> {
    let mut trainer = Trainer::new(bundle, config.clone())?;
    if split.val.is_empty() {
        return Err(Error::contract("training needs a validation split"));
    }
    let pools = pools(split)?;
    let mut order_rng = seed::rng_for(config.seed, "train/order");
    let mut lab = Cycler::new(pools.labelled.len(), &mut order_rng);
    let mut img = Cycler::new(pools.images.len(), &mut order_rng);
    let mut msk = Cycler::new(pools.real_masks.len(), &mut order_rng);
    let bs = config.batch_size;
    let mut iters = pools.labelled.len().max(pools.images.len()).div_ceil(bs);
    if config.max_iters_per_epoch > 0 {
        iters = iters.min(config.max_iters_per_epoch);
    }
    let corruption = config.corruption_params();
    let mut history = TrainHistory::default();
    let mut val_sup = Vec::new();
    let mut best = trainer.bundle.clone();
    for epoch in 1..=config.max_epochs {
        let mut sums = [0.0f64; 7];
        for it in 0..iters {
            let idx = lab.take(bs.min(pools.labelled.len()), &mut order_rng);
            let x = images_to_tensor(&idx.iter().map(|&i| pools.labelled[i].0).collect::<Vec<_>>())?;
            let y = masks_to_tensor(&idx.iter().map(|&i| pools.labelled[i].1).collect::<Vec<_>>())?;
            let sup = trainer.train_step_supervised(&x, &y)?;
            let l = loss_f64(&sup);
            if !l.is_finite() {
                on_divergence(&best, &history);
                return Err(diverged(epoch, it, names::SUPERVISED));
            }
            let k = bs.min(pools.images.len()).min(pools.real_masks.len());
            let xi = img.take(k, &mut order_rng);
            let mi = msk.take(k, &mut order_rng);
            let xu = images_to_tensor(&xi.iter().map(|&i| pools.images[i]).collect::<Vec<_>>())?;
            let ym = masks_to_tensor(&mi.iter().map(|&i| pools.real_masks[i]).collect::<Vec<_>>())?;
            let adv = trainer.train_step_adversarial(&xu, &ym, l)?;
            let d = &adv.discriminator;
            let vals = [
                l,
                2.0 * d.component("real").map_or(0.0, |v| v.to_f64()),
                2.0 * d.component("fake").map_or(0.0, |v| v.to_f64()),
                d.component("gradient_penalty").map_or(0.0, |v| v.to_f64()),
                loss_f64(&adv.generator),
                adv.weight,
                adv.generator.component("reconstruction").map_or(0.0, |v| v.to_f64()),
            ];
            if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
                on_divergence(&best, &history);
                let what = [names::SUPERVISED, names::DISC_REAL, names::DISC_FAKE, names::GRADIENT_PENALTY, names::GENERATOR, names::DYNAMIC_WEIGHT, names::RECONSTRUCTION][i];
                return Err(diverged(epoch, it, what));
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
        }
        let m = |i: usize| sums[i] / iters as f64;
        use HistorySplit::{Train, Val};
        history.push(epoch, Train, names::SUPERVISED, m(0))?;
        history.push(epoch, Train, names::DISC_REAL, m(1))?;
        history.push(epoch, Train, names::DISC_FAKE, m(2))?;
        history.push(epoch, Train, names::GRADIENT_PENALTY, m(3))?;
        history.push(epoch, Train, names::GENERATOR, m(4))?;
        history.push(epoch, Train, names::DYNAMIC_WEIGHT, m(5))?;
        if trainer.bundle.is_causal() {
            history.push(epoch, Train, names::RECONSTRUCTION, m(6))?;
        }
        let v = validation_losses(&trainer.bundle, &split.val, bs, &corruption, config.seed)?;
        if !v.supervised.is_finite() || !v.disc_real.is_finite() || !v.disc_fake.is_finite() {
            on_divergence(&best, &history);
            return Err(diverged(epoch, iters, "validation loss"));
        }
        history.push(epoch, Val, names::SUPERVISED, v.supervised)?;
        history.push(epoch, Val, names::DISC_REAL, v.disc_real)?;
        history.push(epoch, Val, names::DISC_FAKE, v.disc_fake)?;
        history.push(epoch, Val, names::DICE, v.dice)?;
        history.push(epoch, Val, names::ANCHOR_GAP, v.anchor_gap)?;
        if let Some(r) = v.reconstruction {
            history.push(epoch, Val, names::RECONSTRUCTION, r)?;
        }
        log::info!(
            "epoch {epoch}: sup {:.4} val {:.4} dice {:.3} d_real {:.3} d_fake {:.3}",
            m(0),
            v.supervised,
            v.dice,
            v.disc_real,
            v.disc_fake
        );
        val_sup.push(v.supervised);
        if argmin(&val_sup) == val_sup.len() - 1 {
            best = trainer.bundle.clone();
        }
        if should_stop(&val_sup, config.val_patience)? {
            break;
        }
    }
    Ok((best, history))
}

/// Trains until the validation supervised loss stops improving and returns
/// the bundle from the best epoch.
pub fn fit<T: Real>(bundle: ModelBundle<T>, split: &DataSplit<T>, config: &TrainConfig) -> Result<(ModelBundle<T>, TrainHistory)> {
    fit_with_snapshot(bundle, split, config, |_, _| {})
}
