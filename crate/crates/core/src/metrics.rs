//! Overlap and boundary metrics, per-patient records, aggregation and the
//! paired bootstrap test.

use crate::datagen::Mask;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Before,
    After,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Before => "before",
            Phase::After => "after",
        }
    }
}

fn check_pair<T: Real>(a: &Mask<T>, b: &Mask<T>) -> Result<()> {
    if (a.height, a.width, a.classes) != (b.height, b.width, b.classes) {
        return Err(Error::contract(format!(
            "mask shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.classes, b.height, b.width, b.classes
        )));
    }
    Ok(())
}

/// Per-class `(|A∩B|, |A|, |B|)`.
fn overlaps(la: &[u8], lb: &[u8], classes: usize) -> Vec<(u64, u64, u64)> {
    let mut out = vec![(0, 0, 0); classes];
    for (&x, &y) in la.iter().zip(lb) {
        out[x as usize].1 += 1;
        out[y as usize].2 += 1;
        if x == y {
            out[x as usize].0 += 1;
        }
    }
    out
}

fn dice_from(c: (u64, u64, u64)) -> f64 {
    if c.1 + c.2 == 0 {
        1.0
    } else {
        2.0 * c.0 as f64 / (c.1 + c.2) as f64
    }
}

fn iou_from(c: (u64, u64, u64)) -> f64 {
    let union = c.1 + c.2 - c.0;
    if union == 0 {
        1.0
    } else {
        c.0 as f64 / union as f64
    }
}

/// Per-class `2|A∩B|/(|A|+|B|)`; 1 when both are empty.
pub fn dice<T: Real>(a: &Mask<T>, b: &Mask<T>) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    Ok(overlaps(&a.labels(), &b.labels(), a.classes).into_iter().map(dice_from).collect())
}

/// Per-class `|A∩B|/|A∪B|`; 1 when both are empty.
pub fn iou<T: Real>(a: &Mask<T>, b: &Mask<T>) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    Ok(overlaps(&a.labels(), &b.labels(), a.classes).into_iter().map(iou_from).collect())
}

/// 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first = true;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if first {
            v[0] = q;
            first = false;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else if s <= z[k] {
                // k == 0 and z[0] is -inf: cannot happen, kept for clarity
                unreachable!();
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if first {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// (infinite everywhere when the set is empty).
pub fn squared_distance_transform(set: &[bool], h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; n];
    let mut d: Vec<f64> = set.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for x in 0..w {
        for y in 0..h {
            col[y] = d[y * w + x];
        }
        edt_1d(&col, &mut tmp[..h], &mut v, &mut z);
        for y in 0..h {
            d[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&d[y * w..(y + 1) * w]);
        edt_1d(&row, &mut tmp[..w], &mut v, &mut z);
        d[y * w..(y + 1) * w].copy_from_slice(&tmp[..w]);
    }
    d
}

fn hausdorff_sets(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let (na, nb) = (a.iter().any(|&x| x), b.iter().any(|&x| x));
    match (na, nb) {
        (false, false) => 0.0,
        (true, false) | (false, true) => h.max(w) as f64,
        (true, true) => {
            let (da, db) = (squared_distance_transform(a, h, w), squared_distance_transform(b, h, w));
            let ab = a.iter().zip(&db).filter(|p| *p.0).map(|p| *p.1).fold(0.0, f64::max);
            let ba = b.iter().zip(&da).filter(|p| *p.0).map(|p| *p.1).fold(0.0, f64::max);
            ab.max(ba).sqrt()
        }
    }
}

/// Per-class symmetric Hausdorff distance in pixels between foreground sets;
/// `max(h, w)` when exactly one set is empty, 0 when both are.
pub fn hausdorff<T: Real>(a: &Mask<T>, b: &Mask<T>) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let (la, lb) = (a.labels(), b.labels());
    Ok((0..a.classes)
        .map(|c| {
            let sa: Vec<bool> = la.iter().map(|&l| l as usize == c).collect();
            let sb: Vec<bool> = lb.iter().map(|&l| l as usize == c).collect();
            hausdorff_sets(&sa, &sb, a.height, a.width)
        })
        .collect())
}

/// Metrics of one subject in one phase, per class (index 0 is background).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub patient_id: String,
    pub phase: Phase,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub hausdorff: Vec<f64>,
}

fn fg_mean(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return v.first().copied().unwrap_or(f64::NAN);
    }
    v[1..].iter().sum::<f64>() / (v.len() - 1) as f64
}

impl MetricRecord {
    /// Dice and IoU from overlap counts pooled over all slices of the
    /// subject; Hausdorff as the mean of per-slice distances.
    pub fn from_slices<T: Real>(patient_id: &str, phase: Phase, pred: &[&Mask<T>], truth: &[&Mask<T>]) -> Result<Self> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::contract(format!("{} predicted vs {} reference slices", pred.len(), truth.len())));
        }
        let classes = truth[0].classes;
        let mut pooled = vec![(0u64, 0u64, 0u64); classes];
        let mut hd = vec![0.0; classes];
        for (p, t) in pred.iter().zip(truth) {
            check_pair(p, t)?;
            for (acc, c) in pooled.iter_mut().zip(overlaps(&p.labels(), &t.labels(), classes)) {
                acc.0 += c.0;
                acc.1 += c.1;
                acc.2 += c.2;
            }
            for (acc, d) in hd.iter_mut().zip(hausdorff(p, t)?) {
                *acc += d;
            }
        }
        let n = pred.len() as f64;
        Ok(Self {
            patient_id: patient_id.to_owned(),
            phase,
            dice: pooled.iter().copied().map(dice_from).collect(),
            iou: pooled.iter().copied().map(iou_from).collect(),
            hausdorff: hd.into_iter().map(|d| d / n).collect(),
        })
    }

    pub fn mean_dice(&self) -> f64 {
        fg_mean(&self.dice)
    }
    pub fn mean_iou(&self) -> f64 {
        fg_mean(&self.iou)
    }
    pub fn mean_hausdorff(&self) -> f64 {
        fg_mean(&self.hausdorff)
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub n_patients: usize,
    /// Foreground-mean metrics.
    pub dice: Stat,
    pub iou: Stat,
    pub hausdorff: Stat,
    /// Per-class statistics, background included at index 0.
    pub class_dice: Vec<Stat>,
    pub class_iou: Vec<Stat>,
    pub class_hausdorff: Vec<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub dice: f64,
    pub iou: f64,
    pub hausdorff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub before: Option<PhaseSummary>,
    pub after: Option<PhaseSummary>,
    /// `after − before` of the foreground means.
    pub delta: Option<Deltas>,
}

fn summarize(records: &[&MetricRecord]) -> Option<PhaseSummary> {
    let first = records.first()?;
    let classes = first.dice.len();
    let col = |f: &dyn Fn(&MetricRecord) -> f64| Stat::of(&records.iter().map(|r| f(r)).collect::<Vec<_>>());
    Some(PhaseSummary {
        n_patients: records.len(),
        dice: col(&|r| r.mean_dice()),
        iou: col(&|r| r.mean_iou()),
        hausdorff: col(&|r| r.mean_hausdorff()),
        class_dice: (0..classes).map(|c| col(&|r| r.dice[c])).collect(),
        class_iou: (0..classes).map(|c| col(&|r| r.iou[c])).collect(),
        class_hausdorff: (0..classes).map(|c| col(&|r| r.hausdorff[c])).collect(),
    })
}

/// Mean/std per metric and phase over patients, plus before → after deltas.
pub fn aggregate(records: &[MetricRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::contract("no metric records to aggregate"));
    }
    let classes = records[0].dice.len();
    if records.iter().any(|r| r.dice.len() != classes || r.iou.len() != classes || r.hausdorff.len() != classes) {
        return Err(Error::contract("records disagree on the number of classes"));
    }
    // sort so the summary does not depend on record order
    let mut sorted: Vec<&MetricRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (a.phase, &a.patient_id).cmp(&(b.phase, &b.patient_id)));
    let before = summarize(&sorted.iter().copied().filter(|r| r.phase == Phase::Before).collect::<Vec<_>>());
    let after = summarize(&sorted.iter().copied().filter(|r| r.phase == Phase::After).collect::<Vec<_>>());
    let delta = match (&before, &after) {
        (Some(b), Some(a)) => Some(Deltas {
            dice: a.dice.mean - b.dice.mean,
            iou: a.iou.mean - b.iou.mean,
            hausdorff: a.hausdorff.mean - b.hausdorff.mean,
        }),
        _ => None,
    };
    Ok(Summary { before, after, delta })
}

fn paired_t(d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
    }
    mean / (var / n).sqrt()
}

/// Two-sided bootstrap p-value of the paired t statistic. The null
/// distribution resamples the mean-centred differences with replacement;
/// `p = (#{|t*| ≥ |t|} + 1)/(B + 1)`.
pub fn bootstrap_ttest(before: &[f64], after: &[f64], n_boot: usize, seed: u64) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::contract(format!("{} vs {} paired samples", before.len(), after.len())));
    }
    if before.len() < 5 {
        return Err(Error::contract("the paired bootstrap needs at least 5 pairs"));
    }
    if n_boot == 0 {
        return Err(Error::config("n_boot must be positive"));
    }
    let d: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let t_obs = paired_t(&d).abs();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let centred: Vec<f64> = d.iter().map(|v| v - mean).collect();
    let mut rng = seed::rng(seed);
    let mut sample = vec![0.0; d.len()];
    let mut hits = 0usize;
    for _ in 0..n_boot {
        for s in sample.iter_mut() {
            *s = centred[rng.random_range(0..centred.len())];
        }
        if paired_t(&sample).abs() >= t_obs {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (n_boot + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask(h: usize, w: usize, classes: usize, labels: &[u8]) -> Mask<f32> {
        Mask::from_labels(h, w, classes, labels).unwrap()
    }

    fn brute_sq_dt(set: &[bool], h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|p| {
                set.iter()
                    .enumerate()
                    .filter(|q| *q.1)
                    .map(|(q, _)| ((p / w) as f64 - (q / w) as f64).powi(2) + ((p % w) as f64 - (q % w) as f64).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn dice_and_iou_examples() {
        let a = mask(2, 2, 2, &[0, 1, 1, 0]);
        assert_eq!(dice(&a, &a).unwrap(), vec![1.0, 1.0]);
        let b = mask(2, 2, 2, &[1, 0, 0, 1]);
        assert_eq!(dice(&a, &b).unwrap(), vec![0.0, 0.0]);
        assert_eq!(iou(&a, &a).unwrap(), vec![1.0, 1.0]);
        // class 2 absent from both → 1
        let c = mask(2, 2, 3, &[0, 1, 1, 0]);
        assert_eq!(dice(&c, &c).unwrap()[2], 1.0);
        assert!(dice(&a, &c).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let mut la = vec![0u8; 25];
        let mut lb = vec![0u8; 25];
        la[0] = 1;
        lb[4 * 5 + 3] = 1;
        let d = hausdorff(&mask(5, 5, 2, &la), &mask(5, 5, 2, &lb)).unwrap();
        assert_eq!(d[1], 5.0);
        let a = mask(5, 5, 2, &la);
        assert_eq!(hausdorff(&a, &a).unwrap(), vec![0.0, 0.0]);
        let empty = mask(224, 224, 2, &vec![0; 224 * 224]);
        let mut one = vec![0u8; 224 * 224];
        one[100] = 1;
        assert_eq!(hausdorff(&empty, &mask(224, 224, 2, &one)).unwrap()[1], 224.0);
        assert_eq!(hausdorff(&empty, &empty).unwrap()[1], 0.0);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = seed::rng(0);
        for _ in 0..50 {
            let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
            let p = rng.random_range(0.0..0.5);
            let set: Vec<bool> = (0..h * w).map(|_| rng.random_bool(p)).collect();
            assert_eq!(squared_distance_transform(&set, h, w), brute_sq_dt(&set, h, w));
        }
    }

    #[test]
    fn record_identity_and_pooling() {
        let a = mask(2, 2, 2, &[1, 1, 0, 0]);
        let b = mask(2, 2, 2, &[1, 0, 0, 0]);
        let r = MetricRecord::from_slices("p", Phase::Before, &[&a, &a], &[&b, &a]).unwrap();
        // pooled: |A∩B| = 1 + 2, |A| = 4, |B| = 3
        assert_eq!(r.dice[1], 6.0 / 7.0);
        assert_eq!(r.iou[1], 3.0 / 4.0);
        assert_eq!(r.hausdorff[1], 0.5);
        for c in 0..2 {
            assert!((r.dice[c] - 2.0 * r.iou[c] / (1.0 + r.iou[c])).abs() < 1e-12);
        }
    }

    fn record(id: &str, phase: Phase, d: f64) -> MetricRecord {
        MetricRecord { patient_id: id.into(), phase, dice: vec![1.0, d], iou: vec![1.0, d / (2.0 - d)], hausdorff: vec![0.0, 10.0 * d] }
    }

    #[test]
    fn aggregate_by_hand() {
        let single = aggregate(&[record("a", Phase::Before, 0.7)]).unwrap();
        assert_eq!(single.before.as_ref().unwrap().dice.std, 0.0);
        assert!(single.after.is_none() && single.delta.is_none());
        let recs = vec![record("a", Phase::Before, 0.5), record("b", Phase::Before, 0.7), record("c", Phase::Before, 0.9)];
        let s = aggregate(&recs).unwrap().before.unwrap();
        assert!((s.dice.mean - 0.7).abs() < 1e-15);
        assert!((s.dice.std - (0.08f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.n_patients, 3);
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(aggregate(&rev).unwrap(), aggregate(&recs).unwrap());
        let mut both = recs.clone();
        both.extend(recs.iter().map(|r| MetricRecord { phase: Phase::After, ..r.clone() }));
        assert_eq!(aggregate(&both).unwrap().delta.unwrap(), Deltas { dice: 0.0, iou: 0.0, hausdorff: 0.0 });
    }

    #[test]
    fn bootstrap_examples() {
        let before = [0.61, 0.72, 0.55, 0.80, 0.67, 0.70, 0.59, 0.74];
        assert_eq!(bootstrap_ttest(&before, &before, 2000, 1).unwrap(), 1.0);
        let shifted: Vec<f64> = before.iter().enumerate().map(|(i, b)| b + 0.1 + 0.001 * (i % 3) as f64).collect();
        assert!(bootstrap_ttest(&before, &shifted, 2000, 1).unwrap() < 0.01);
        assert!(bootstrap_ttest(&before[..4], &before[..4], 10, 0).is_err());
        assert!(bootstrap_ttest(&before, &before[..6], 10, 0).is_err());
        let a = bootstrap_ttest(&before, &shifted, 500, 3).unwrap();
        assert_eq!(a, bootstrap_ttest(&before, &shifted, 500, 3).unwrap());
    }

    /// Independent resampling oracle with its own generator.
    fn oracle_p(before: &[f64], after: &[f64], b: usize, mut state: u64) -> f64 {
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let d: Vec<f64> = before.iter().zip(after).map(|(x, y)| y - x).collect();
        let n = d.len();
        let t = |s: &[f64]| {
            let m = s.iter().sum::<f64>() / n as f64;
            let v = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            if v == 0.0 { 0.0 } else { m / (v / n as f64).sqrt() }
        };
        let m = d.iter().sum::<f64>() / n as f64;
        let t0 = t(&d).abs();
        let mut hits = 0;
        for _ in 0..b {
            let s: Vec<f64> = (0..n).map(|_| d[(next() % n as u64) as usize] - m).collect();
            if t(&s).abs() >= t0 {
                hits += 1;
            }
        }
        (hits + 1) as f64 / (b + 1) as f64
    }

    #[test]
    fn bootstrap_matches_oracle() {
        let before = [0.62, 0.70, 0.58, 0.81, 0.66, 0.73, 0.60, 0.75, 0.69, 0.64];
        let after = [0.66, 0.69, 0.63, 0.83, 0.65, 0.78, 0.61, 0.80, 0.70, 0.69];
        let p = bootstrap_ttest(&before, &after, 10_000, 11).unwrap();
        let q = oracle_p(&before, &after, 10_000, 0x1234_5678_9abc_def1);
        assert!((p - q).abs() < 0.02, "{p} vs {q}");
    }

    proptest! {
        #[test]
        fn symmetric_and_identity(seed in 0u64..10_000) {
            let mut rng = seed::rng(seed);
            let la: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
            let lb: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
            let (a, b) = (mask(8, 8, 3, &la), mask(8, 8, 3, &lb));
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            prop_assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
            for (d, i) in dice(&a, &b).unwrap().into_iter().zip(iou(&a, &b).unwrap()) {
                prop_assert!(d >= i);
                prop_assert!((i - d / (2.0 - d)).abs() < 1e-12);
            }
        }

        #[test]
        fn hausdorff_translation_invariant(seed in 0u64..10_000, dy in 0usize..4, dx in 0usize..4) {
            let mut rng = seed::rng(seed);
            let (mut la, mut lb) = (vec![0u8; 256], vec![0u8; 256]);
            for y in 4..10 {
                for x in 4..10 {
                    la[y * 16 + x] = rng.random_range(0..2);
                    lb[y * 16 + x] = rng.random_range(0..2);
                }
            }
            let shift = |l: &[u8]| {
                let mut o = vec![0u8; 256];
                for p in 0..256 {
                    if l[p] > 0 {
                        o[(p / 16 + dy) * 16 + p % 16 + dx] = l[p];
                    }
                }
                o
            };
            let d0 = hausdorff(&mask(16, 16, 2, &la), &mask(16, 16, 2, &lb)).unwrap();
            let d1 = hausdorff(&mask(16, 16, 2, &shift(&la)), &mask(16, 16, 2, &shift(&lb))).unwrap();
            prop_assert_eq!(d0[1], d1[1]);
        }
    }
}
