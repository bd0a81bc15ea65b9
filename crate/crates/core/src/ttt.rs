//! Test-time training: the adaptor is fine-tuned on one subject against the
//! frozen discriminator (and optionally the frozen decoder), keeping the
//! prediction with the lowest loss.

use crate::causal::reconstruction_grads;
use crate::datagen::{Mask, PatientVolume, SoftMask};
use crate::error::{Error, Result};
use crate::losses::lsgan_generator_loss;
use crate::metrics::{MetricRecord, Phase};
use crate::nets::{Adaptor, AdaptorCache, Decoder, Discriminator, ModelBundle, Segmentor};
use crate::nn::{digest, Adam, Module};
use crate::scalar::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TttMode {
    Adversarial,
    Reconstruction,
    Both,
}

impl TttMode {
    fn adversarial(self) -> bool {
        self != Self::Reconstruction
    }
    fn reconstruction(self) -> bool {
        self != Self::Adversarial
    }
}

impl FromStr for TttMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adversarial" => Ok(Self::Adversarial),
            "reconstruction" => Ok(Self::Reconstruction),
            "both" => Ok(Self::Both),
            _ => Err(Error::config(format!("unknown TTT mode {s:?} (adversarial, reconstruction, both)"))),
        }
    }
}

impl fmt::Display for TttMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adversarial => "adversarial",
            Self::Reconstruction => "reconstruction",
            Self::Both => "both",
        })
    }
}

/// What one adaptor copy is fitted to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TttUnit {
    /// One adaptor for all slices of a subject.
    Patient,
    /// One adaptor per slice, optimized jointly under a common stopping rule.
    Slice,
}

impl FromStr for TttUnit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patient" => Ok(Self::Patient),
            "slice" => Ok(Self::Slice),
            _ => Err(Error::config(format!("unknown TTT unit {s:?} (patient, slice)"))),
        }
    }
}

impl fmt::Display for TttUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Patient => "patient",
            Self::Slice => "slice",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTTConfig {
    pub patience: usize,
    pub max_iter: usize,
    pub mode: TttMode,
    pub unit: TttUnit,
    pub continual: bool,
    /// In continual mode, adapt only the first `k` subjects of the stream and
    /// run plain inference with the resulting adaptor on the rest.
    pub freeze_after: Option<usize>,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TTTConfig {
    fn default() -> Self {
        Self {
            patience: 200,
            max_iter: 1000,
            mode: TttMode::Adversarial,
            unit: TttUnit::Patient,
            continual: false,
            freeze_after: None,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl TTTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.patience > self.max_iter {
            return Err(Error::config(format!("need 0 < patience ({}) <= max_iter ({})", self.patience, self.max_iter)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("TTT learning rate must be positive"));
        }
        if self.continual && self.unit != TttUnit::Patient {
            return Err(Error::config("continual adaptation needs unit = patient"));
        }
        if self.freeze_after.is_some() && !self.continual {
            return Err(Error::config("freeze_after only applies to continual adaptation"));
        }
        Ok(())
    }
}

/// Outcome of adapting one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct TTTResult<T> {
    pub patient_id: String,
    /// Prediction at the minimum-loss step, one mask per slice.
    pub best_masks: Vec<SoftMask<T>>,
    /// Prediction before any update.
    pub initial_masks: Vec<SoftMask<T>>,
    pub best_loss: f64,
    /// 1-based step of `best_loss` in `trace`.
    pub best_step: usize,
    pub n_iter: usize,
    /// Loss at every evaluated step.
    pub trace: Vec<f64>,
    /// Set when a non-finite loss cut the run short.
    pub diverged: bool,
    /// False for subjects run with a frozen adaptor.
    pub adapted: bool,
    /// Adaptor parameters (one flat vector per adaptor copy) at `best_step`.
    pub best_adaptor: Vec<Vec<T>>,
    /// Parameter digests of the adaptor(s) at the start and the end of the run.
    pub adaptor_start: u64,
    pub adaptor_end: u64,
}

/// True iff `trace` reached `max_iter` entries or its running minimum has not
/// improved within the last `patience` entries.
pub fn stopping_check(trace: &[f64], patience: usize, max_iter: usize) -> bool {
    if trace.is_empty() {
        return false;
    }
    if trace.len() >= max_iter {
        return true;
    }
    let mut best = 0;
    for (i, &v) in trace.iter().enumerate() {
        if v < trace[best] {
            best = i;
        }
    }
    trace.len() - 1 - best >= patience
}

/// Working copies of the frozen networks.
struct Frozen<T> {
    segmentor: Segmentor<T>,
    discriminator: Discriminator<T>,
    decoder: Option<Decoder<T>>,
}

impl<T: Real> Frozen<T> {
    fn of(bundle: &ModelBundle<T>, mode: TttMode) -> Result<Self> {
        if mode.reconstruction() && !bundle.is_causal() {
            return Err(Error::config(format!("TTT mode {mode} needs a causal model with a decoder")));
        }
        Ok(Self {
            segmentor: bundle.segmentor.clone(),
            discriminator: bundle.discriminator.clone(),
            decoder: bundle.decoder.clone(),
        })
    }
}

struct Evaluation<T> {
    adversarial: f64,
    reconstruction: f64,
    probs: Tensor<T>,
}

impl<T> Evaluation<T> {
    fn total(&self) -> f64 {
        self.adversarial + self.reconstruction
    }
}

fn take_samples<T: Real>(x: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let mut shape = x.shape();
    shape[0] = end - start;
    let len = x.sample_len();
    Tensor::from_vec(shape, x.data()[start * len..end * len].to_vec()).expect("sample range")
}

fn concat_samples<T: Real>(parts: &[Tensor<T>]) -> Tensor<T> {
    let mut shape = parts[0].shape();
    shape[0] = parts.iter().map(|p| p.n()).sum();
    Tensor::from_vec(shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect()).expect("uniform parts")
}

/// Sample range of each adaptor copy.
fn groups(n: usize, unit: TttUnit) -> Vec<(usize, usize)> {
    match unit {
        TttUnit::Patient => vec![(0, n)],
        TttUnit::Slice => (0..n).map(|i| (i, i + 1)).collect(),
    }
}

/// Loss of the current adaptors; with `grads` their gradients are replaced
/// by the loss gradient.
fn evaluate<T: Real>(
    frozen: &mut Frozen<T>,
    adaptors: &mut [Adaptor<T>],
    ranges: &[(usize, usize)],
    x: &Tensor<T>,
    mode: TttMode,
    grads: bool,
) -> Result<Evaluation<T>> {
    let mut parts = Vec::with_capacity(ranges.len());
    let mut caches: Vec<AdaptorCache<T>> = Vec::with_capacity(ranges.len());
    for (a, &(s, e)) in adaptors.iter().zip(ranges) {
        let (y, c) = a.forward(&take_samples(x, s, e));
        parts.push(y);
        caches.push(c);
    }
    let adapted = if parts.len() == 1 { parts.pop().expect("one part") } else { concat_samples(&parts) };
    let (seg, seg_cache) = frozen.segmentor.forward(&adapted, false);
    let mut dprobs = Tensor::zeros(seg.probs.shape());
    let mut adversarial = 0.0;
    if mode.adversarial() {
        let (scores, dcache) = frozen.discriminator.forward(&seg.probs);
        let (gen, g) = lsgan_generator_loss(&scores);
        adversarial = gen.value.to_f64();
        if grads {
            dprobs = frozen.discriminator.gradients(&dcache, &g, false).0;
        }
    }
    let mut reconstruction = 0.0;
    let (mut dres, mut dadapted) = (None, None);
    if mode.reconstruction() {
        let dec = frozen.decoder.as_mut().ok_or_else(|| Error::config("reconstruction needs a decoder"))?;
        let r = seg.residual.as_ref().ok_or_else(|| Error::config("reconstruction needs a residual head"))?;
        let rg = reconstruction_grads(dec, &adapted, &seg.probs, r, false)?;
        reconstruction = rg.loss.value.to_f64();
        dprobs.add_assign(&rg.dprobs);
        dres = Some(rg.dresidual);
        dadapted = Some(rg.dadapted);
    }
    if grads {
        let mut dx = frozen.segmentor.backward(&seg_cache, &dprobs, dres.as_ref(), false);
        if let Some(d) = &dadapted {
            dx.add_assign(d);
        }
        for ((a, c), &(s, e)) in adaptors.iter_mut().zip(&caches).zip(ranges) {
            a.zero_grad();
            a.backward(c, &take_samples(&dx, s, e), true, false);
        }
    }
    Ok(Evaluation { adversarial, reconstruction, probs: seg.probs })
}

/// Label-free TTT objective on a `[n, 1, h, w]` batch with the bundle's own
/// adaptor: `½·mean d²`, `mean|x' − x̃'|`, or their sum.
pub fn ttt_loss<T: Real>(bundle: &ModelBundle<T>, x: &Tensor<T>, mode: TttMode) -> Result<f64> {
    let mut frozen = Frozen::of(bundle, mode)?;
    let mut a = [bundle.adaptor.clone()];
    Ok(evaluate(&mut frozen, &mut a, &[(0, x.n())], x, mode, false)?.total())
}

fn adaptors_digest<T: Real>(adaptors: &[Adaptor<T>]) -> u64 {
    digest(adaptors.iter().flat_map(|a| a.params()))
}

/// Adaptation state carried across subjects in continual mode.
struct State<T> {
    adaptors: Vec<Adaptor<T>>,
    opts: Vec<Adam<T>>,
}

fn run<T: Real>(frozen: &mut Frozen<T>, state: &mut State<T>, subject: &PatientVolume<T>, config: &TTTConfig, adapt: bool) -> Result<TTTResult<T>> {
    let x = subject.image_tensor()?;
    let ranges = groups(x.n(), config.unit);
    assert_eq!(ranges.len(), state.adaptors.len(), "one adaptor per unit");
    let start = adaptors_digest(&state.adaptors);
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, Tensor<T>, Vec<Vec<T>>)> = None;
    let mut initial = None;
    let mut diverged = false;
    loop {
        let ev = evaluate(frozen, &mut state.adaptors, &ranges, &x, config.mode, adapt)?;
        let loss = ev.total();
        if !loss.is_finite() {
            log::warn!("TTT on {} stopped at step {}: non-finite loss", subject.patient_id, trace.len() + 1);
            diverged = true;
            break;
        }
        trace.push(loss);
        if initial.is_none() {
            initial = Some(ev.probs.clone());
        }
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, trace.len(), ev.probs, state.adaptors.iter().map(|a| a.flat_values()).collect()));
        }
        if !adapt || stopping_check(&trace, config.patience, config.max_iter) {
            break;
        }
        for (a, opt) in state.adaptors.iter_mut().zip(&mut state.opts) {
            opt.step(&mut a.params_mut());
        }
    }
    let (best_loss, best_step, probs, best_adaptor) =
        best.ok_or_else(|| Error::Diverged { epoch: 0, iteration: 0, what: format!("TTT loss of {}", subject.patient_id) })?;
    Ok(TTTResult {
        patient_id: subject.patient_id.clone(),
        best_masks: SoftMask::from_tensor(&probs),
        initial_masks: SoftMask::from_tensor(initial.as_ref().expect("set with best")),
        best_loss,
        best_step,
        n_iter: trace.len(),
        trace,
        diverged,
        adapted: adapt,
        best_adaptor,
        adaptor_start: start,
        adaptor_end: adaptors_digest(&state.adaptors),
    })
}

fn check_bundle<T: Real>(bundle: &ModelBundle<T>) -> Result<()> {
    if !bundle.config.use_adaptor {
        return Err(Error::config("test-time training needs a model with an adaptor"));
    }
    Ok(())
}

fn fresh_state<T: Real>(bundle: &ModelBundle<T>, units: usize, lr: f64) -> State<T> {
    State { adaptors: vec![bundle.adaptor.clone(); units], opts: (0..units).map(|_| Adam::new(lr)).collect() }
}

/// Adapts a fresh copy of the bundle's adaptor to one subject with a fresh
/// optimizer. The bundle itself is never modified.
pub fn ttt_adapt<T: Real>(bundle: &ModelBundle<T>, subject: &PatientVolume<T>, config: &TTTConfig) -> Result<TTTResult<T>> {
    config.validate()?;
    check_bundle(bundle)?;
    let mut frozen = Frozen::of(bundle, config.mode)?;
    let n = subject.slices.len();
    let mut state = fresh_state(bundle, groups(n, config.unit).len(), config.learning_rate);
    run(&mut frozen, &mut state, subject, config, true)
}

/// Adapts subjects in stream order, carrying the adaptor and optimizer state
/// from one subject to the next.
pub fn ttt_continual<T: Real>(bundle: &ModelBundle<T>, subjects: &[PatientVolume<T>], config: &TTTConfig) -> Result<Vec<TTTResult<T>>> {
    config.validate()?;
    check_bundle(bundle)?;
    if !config.continual {
        return Err(Error::config("ttt_continual needs continual = true"));
    }
    if subjects.is_empty() {
        return Err(Error::contract("empty subject stream"));
    }
    let mut frozen = Frozen::of(bundle, config.mode)?;
    let mut state = fresh_state(bundle, 1, config.learning_rate);
    let mut out = Vec::with_capacity(subjects.len());
    for (k, s) in subjects.iter().enumerate() {
        let adapt = config.freeze_after.is_none_or(|f| k < f);
        out.push(run(&mut frozen, &mut state, s, config, adapt)?);
    }
    Ok(out)
}

/// Per-subject TTT outcomes plus before/after metric records.
#[derive(Clone, Debug)]
pub struct TttExperiment<T> {
    pub results: Vec<TTTResult<T>>,
    /// One `Before` and one `After` record per evaluated subject.
    pub records: Vec<MetricRecord>,
    /// Subjects without ground truth (adapted, not scored).
    pub unscored: Vec<String>,
}

fn score<T: Real>(result: &TTTResult<T>, subject: &PatientVolume<T>) -> Result<Option<[MetricRecord; 2]>> {
    let Some(truth) = subject.masks() else {
        return Ok(None);
    };
    let harden = |m: &[SoftMask<T>]| m.iter().map(|s| s.harden()).collect::<Vec<Mask<T>>>();
    let (before, after) = (harden(&result.initial_masks), harden(&result.best_masks));
    let b: Vec<&Mask<T>> = before.iter().collect();
    let a: Vec<&Mask<T>> = after.iter().collect();
    Ok(Some([
        MetricRecord::from_slices(&subject.patient_id, Phase::Before, &b, &truth)?,
        MetricRecord::from_slices(&subject.patient_id, Phase::After, &a, &truth)?,
    ]))
}

/// Runs TTT over a test set (continual or independent per `config`) and
/// scores predictions before and after adaptation. Ground truth is read only
/// after adaptation finished. Independent runs use up to `jobs` threads; the
/// output does not depend on `jobs`.
pub fn evaluate_ttt_experiment<T: Real>(bundle: &ModelBundle<T>, test_set: &[PatientVolume<T>], config: &TTTConfig, jobs: usize) -> Result<TttExperiment<T>> {
    config.validate()?;
    // labels never reach the adaptation loop
    let blind: Vec<PatientVolume<T>> = test_set.iter().map(|v| v.without_masks()).collect();
    let results = if config.continual {
        ttt_continual(bundle, &blind, config)?
    } else if jobs <= 1 || blind.len() <= 1 {
        blind.iter().map(|s| ttt_adapt(bundle, s, config)).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = blind.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = blind
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| ttt_adapt(bundle, s, config)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(blind.len());
            for h in handles {
                all.extend(h.join().expect("TTT worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let mut records = Vec::new();
    let mut unscored = Vec::new();
    for (r, s) in results.iter().zip(test_set) {
        match score(r, s)? {
            Some(pair) => records.extend(pair),
            None => {
                log::warn!("subject {} has no ground truth; skipping evaluation", s.patient_id);
                unscored.push(s.patient_id.clone());
            }
        }
    }
    Ok(TttExperiment { results, records, unscored })
}

/// Metric records of plain inference (no adaptation).
pub fn evaluate_inference<T: Real>(bundle: &ModelBundle<T>, volumes: &[PatientVolume<T>], phase: Phase) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for v in volumes {
        let Some(truth) = v.masks() else {
            log::warn!("subject {} has no ground truth; skipping evaluation", v.patient_id);
            continue;
        };
        let probs = bundle.predict(&v.image_tensor()?);
        let pred: Vec<Mask<T>> = SoftMask::from_tensor(&probs).iter().map(|s| s.harden()).collect();
        out.push(MetricRecord::from_slices(&v.patient_id, phase, &pred.iter().collect::<Vec<_>>(), &truth)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_synthetic_dataset;
    use crate::nets::{init_models, ModelConfig};

    fn model(causal: bool) -> ModelBundle<f64> {
        let cfg = ModelConfig {
            image_size: 32,
            n_classes: 3,
            adaptor_width: 4,
            unet_depth: 2,
            unet_width: 4,
            disc_widths: vec![4, 4, 4, 4, 4],
            causal,
            residual_channels: 2,
            decoder_width: 4,
            ..ModelConfig::default()
        };
        init_models(&cfg, 2).unwrap()
    }

    fn subjects(n: usize) -> Vec<PatientVolume<f64>> {
        generate_synthetic_dataset::<f64>(n, 2, 32, 3, 4).unwrap()
    }

    fn cfg(patience: usize, max_iter: usize) -> TTTConfig {
        TTTConfig { patience, max_iter, learning_rate: 1e-3, ..TTTConfig::default() }
    }

    fn first_stop(trace: &[f64], patience: usize, max_iter: usize) -> usize {
        (1..=trace.len()).find(|&k| stopping_check(&trace[..k], patience, max_iter)).unwrap_or(0)
    }

    #[test]
    fn stopping_rule_examples() {
        // minimum at step 10, flat afterwards
        let mut t: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        t.extend(std::iter::repeat_n(1.0, 500));
        assert_eq!(first_stop(&t, 200, 1000), 210);
        // minima keep arriving until step 950
        let mut late: Vec<f64> = (0..950).map(|i| 2000.0 - i as f64).collect();
        late.extend(std::iter::repeat_n(5000.0, 100));
        assert_eq!(first_stop(&late, 200, 1000), 1000);
        let dec: Vec<f64> = (0..1000).map(|i| -(i as f64)).collect();
        assert!(!stopping_check(&dec[..999], 200, 1000));
        assert_eq!(first_stop(&dec, 200, 1000), 1000);
        // patience == max forces the cap
        assert_eq!(first_stop(&t, 1000, 1000), 0);
        assert_eq!(first_stop(&vec![1.0; 1000], 1000, 1000), 1000);
        assert!(!stopping_check(&[], 1, 1));
    }

    #[test]
    fn config_validation() {
        assert!(TTTConfig::default().validate().is_ok());
        assert!(cfg(0, 10).validate().is_err());
        assert!(cfg(11, 10).validate().is_err());
        assert!(TTTConfig { continual: true, unit: TttUnit::Slice, ..cfg(2, 4) }.validate().is_err());
        assert!(TTTConfig { freeze_after: Some(1), ..cfg(2, 4) }.validate().is_err());
        assert_eq!("both".parse::<TttMode>().unwrap(), TttMode::Both);
        assert!("none".parse::<TttMode>().is_err());
    }

    #[test]
    fn adaptation_isolation_and_best_selection() {
        let b = model(false);
        let before = b.digests();
        let s = &subjects(1)[0];
        let r = ttt_adapt(&b, s, &cfg(5, 30)).unwrap();
        assert_eq!(b.digests(), before);
        assert_eq!(r.n_iter, r.trace.len());
        assert!(r.n_iter <= 30);
        let min = r.trace.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_loss, min);
        assert_eq!(r.trace[r.best_step - 1], min);
        assert_eq!(r.best_masks.len(), 2);
        // the stored argmin adaptor reproduces the stored prediction
        let mut replay = b.clone();
        replay.adaptor.set_flat_values(&r.best_adaptor[0]);
        assert_eq!(SoftMask::from_tensor(&replay.predict(&s.image_tensor().unwrap())), r.best_masks);
        assert_eq!(SoftMask::from_tensor(&b.predict(&s.image_tensor().unwrap())), r.initial_masks);
        assert!(r.trace.len() > 1 && min < r.trace[0]);
    }

    #[test]
    fn patience_equal_to_max_runs_to_the_cap() {
        let b = model(false);
        let r = ttt_adapt(&b, &subjects(1)[0], &cfg(12, 12)).unwrap();
        assert_eq!(r.n_iter, 12);
    }

    #[test]
    fn independent_runs_are_reproducible_and_order_free() {
        let b = model(false);
        let subs = subjects(3);
        let c = cfg(3, 8);
        let a = ttt_adapt(&b, &subs[1], &c).unwrap();
        ttt_adapt(&b, &subs[0], &c).unwrap();
        assert_eq!(ttt_adapt(&b, &subs[1], &c).unwrap(), a);
        let e1 = evaluate_ttt_experiment(&b, &subs, &c, 1).unwrap();
        let e3 = evaluate_ttt_experiment(&b, &subs, &c, 3).unwrap();
        assert_eq!(e1.results, e3.results);
        assert_eq!(e1.records, e3.records);
        assert_eq!(e1.results[1], a);
        assert_eq!(e1.records.len(), 6);
    }

    #[test]
    fn continual_state_persists() {
        let b = model(false);
        let subs = subjects(3);
        let c = TTTConfig { continual: true, ..cfg(3, 6) };
        let rs = ttt_continual(&b, &subs, &c).unwrap();
        assert_eq!(rs[0].adaptor_start, b.adaptor.param_digest());
        for k in 0..2 {
            assert_eq!(rs[k + 1].adaptor_start, rs[k].adaptor_end);
        }
        // a one-subject stream matches a fresh independent run
        let single = ttt_continual(&b, &subs[..1], &c).unwrap();
        assert_eq!(single[0], ttt_adapt(&b, &subs[0], &cfg(3, 6)).unwrap());
        assert!(ttt_continual(&b, &[], &c).is_err());
        assert!(ttt_continual(&b, &subs, &cfg(3, 6)).is_err());
        let frozen = ttt_continual(&b, &subs, &TTTConfig { freeze_after: Some(1), ..c }).unwrap();
        assert!(frozen[0].adapted && !frozen[1].adapted);
        assert_eq!(frozen[1].n_iter, 1);
        assert_eq!(frozen[2].adaptor_start, frozen[1].adaptor_end);
    }

    #[test]
    fn loss_modes() {
        let plain = model(false);
        let x = subjects(1)[0].image_tensor().unwrap();
        assert!(matches!(ttt_loss(&plain, &x, TttMode::Reconstruction), Err(Error::Config(_))));
        let c = model(true);
        let adv = ttt_loss(&c, &x, TttMode::Adversarial).unwrap();
        let rec = ttt_loss(&c, &x, TttMode::Reconstruction).unwrap();
        assert_eq!(ttt_loss(&c, &x, TttMode::Both).unwrap(), adv + rec);
        // a critic that outputs 0 gives zero adversarial loss
        let mut z = plain.clone();
        for p in z.discriminator.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(ttt_loss(&z, &x, TttMode::Adversarial).unwrap(), 0.0);
    }

    #[test]
    fn both_mode_keeps_every_frozen_network() {
        let b = model(true);
        let before = b.digests();
        let r = ttt_adapt(&b, &subjects(1)[0], &TTTConfig { mode: TttMode::Both, ..cfg(3, 10) }).unwrap();
        assert_eq!(b.digests(), before);
        assert!(r.best_loss <= r.trace[0]);
    }

    #[test]
    fn slice_unit_uses_one_adaptor_per_slice() {
        let b = model(false);
        let r = ttt_adapt(&b, &subjects(1)[0], &TTTConfig { unit: TttUnit::Slice, ..cfg(3, 6) }).unwrap();
        assert_eq!(r.best_adaptor.len(), 2);
        assert_eq!(r.best_masks.len(), 2);
    }

    #[test]
    fn identical_masks_give_zero_deltas() {
        let b = model(false);
        let s = subjects(2);
        let e = evaluate_ttt_experiment(&b, &s, &cfg(1, 1), 1).unwrap();
        let summary = crate::metrics::aggregate(&e.records).unwrap();
        let d = summary.delta.unwrap();
        assert_eq!((d.dice, d.iou, d.hausdorff), (0.0, 0.0, 0.0));
        let blind: Vec<_> = s.iter().map(|v| v.without_masks()).collect();
        let e = evaluate_ttt_experiment(&b, &blind, &cfg(1, 1), 1).unwrap();
        assert_eq!(e.unscored.len(), 2);
        assert!(e.records.is_empty());
    }
}
