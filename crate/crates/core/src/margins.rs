//! Per-sample training dynamics.
//!
//! Labeled samples track the area under the margin (AUM): the running mean
//! of `z_y - max_{j≠y} z_j` for the ground-truth class `y`. Unlabeled samples
//! track the average pseudo-margin (APM) with the decaying update
//!
//! ```text
//! APM_c^t = PM_c^t · δ/(1+t) + APM_c^{t-1} · (1 - δ/(1+t))
//! ```
//!
//! where `c` is the pseudo-label at iteration `t`. Every class has its own
//! accumulator, so when the pseudo-label switches the history for the new
//! class is picked up where it was left. A class accumulator only moves when
//! that class is the one being updated; skipped iterations leave it as is.

use std::collections::BTreeMap;
use std::fmt;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MARGIN_TAG: &[u8; 4] = b"MRGN";
const MARGIN_VERSION: u8 = 1;

/// Smoothing used for APM.
pub const DEFAULT_DELTA: f64 = 0.997;

/// Stable per-dataset sample index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `z_c - max_{j≠c} z_j`. Positive only when `c` is the strict argmax.
pub fn pseudo_margin(logits: &[f64], class: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Domain(format!(
            "margin needs at least two classes, got {}",
            logits.len()
        )));
    }
    if class >= logits.len() {
        return Err(Error::Index {
            index: class,
            len: logits.len(),
        });
    }
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != class)
        .map(|(_, z)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[class] - best_other)
}

/// How a class accumulator absorbs a new margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginRule {
    /// Decaying average with fresh weight `delta / (1 + t)` at iteration `t`.
    Ema { delta: f64 },
    /// Plain mean over the updates this accumulator has received.
    RunningMean,
}

#[derive(Debug, Clone, PartialEq)]
struct SampleMargins {
    values: Vec<f64>,
    last_update: Vec<u64>,
    updates: Vec<u64>,
    /// Last iteration at which any class was updated; `None` if never.
    last_any: Option<u64>,
}

impl SampleMargins {
    fn new(classes: usize) -> Self {
        Self {
            values: vec![0.0; classes],
            last_update: vec![0; classes],
            updates: vec![0; classes],
            last_any: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginTracker {
    classes: usize,
    rule: MarginRule,
    iteration: u64,
    samples: BTreeMap<SampleId, SampleMargins>,
}

impl MarginTracker {
    pub fn new(classes: usize, rule: MarginRule) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Parameter(format!("margins need C >= 2, got {classes}")));
        }
        if let MarginRule::Ema { delta } = rule {
            if !(delta > 0.0 && delta <= 1.0) {
                return Err(Error::Parameter(format!("delta {delta} not in (0, 1]")));
            }
        }
        Ok(Self {
            classes,
            rule,
            iteration: 0,
            samples: BTreeMap::new(),
        })
    }

    /// APM tracker for pseudo-labeled samples.
    pub fn apm(classes: usize, delta: f64) -> Result<Self> {
        Self::new(classes, MarginRule::Ema { delta })
    }

    /// AUM tracker for labeled samples.
    pub fn aum(classes: usize) -> Result<Self> {
        Self::new(classes, MarginRule::RunningMean)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rule(&self) -> MarginRule {
        self.rule
    }

    /// Latest iteration seen by any update.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn register(&mut self, id: SampleId) {
        let classes = self.classes;
        self.samples
            .entry(id)
            .or_insert_with(|| SampleMargins::new(classes));
    }

    pub fn register_all(&mut self, ids: impl IntoIterator<Item = SampleId>) {
        ids.into_iter().for_each(|id| self.register(id));
    }

    pub fn is_registered(&self, id: SampleId) -> bool {
        self.samples.contains_key(&id)
    }

    /// Folds the margin of `class` under `logits` into the sample's
    /// accumulator for that class at iteration `t`.
    ///
    /// `t` must be strictly later than the sample's previous update. Returns
    /// the updated accumulator value.
    pub fn update(&mut self, id: SampleId, logits: &[f64], class: usize, t: u64) -> Result<f64> {
        if logits.len() != self.classes {
            return Err(Error::Dimension(format!(
                "{} logits for a {}-class tracker",
                logits.len(),
                self.classes
            )));
        }
        let margin = pseudo_margin(logits, class)?;
        if !margin.is_finite() {
            return Err(Error::Numeric(format!("margin of sample {id}")));
        }
        let rule = self.rule;
        let entry = self.samples.get_mut(&id).ok_or(Error::Lookup(id.0))?;
        if let Some(last) = entry.last_any {
            if t <= last {
                return Err(Error::Usage(format!(
                    "sample {id} updated at iteration {t} after iteration {last}"
                )));
            }
        }
        let value = &mut entry.values[class];
        entry.updates[class] += 1;
        match rule {
            MarginRule::Ema { delta } => {
                let w = delta / (1.0 + t as f64);
                *value = margin * w + *value * (1.0 - w);
            }
            MarginRule::RunningMean => {
                let n = entry.updates[class] as f64;
                *value = ((n - 1.0) * *value + margin) / n;
            }
        }
        entry.last_update[class] = t;
        entry.last_any = Some(t);
        self.iteration = self.iteration.max(t);
        Ok(*value)
    }

    /// Current accumulator for `class`; zero until the first update.
    pub fn value(&self, id: SampleId, class: usize) -> Result<f64> {
        let entry = self.samples.get(&id).ok_or(Error::Lookup(id.0))?;
        entry.values.get(class).copied().ok_or(Error::Index {
            index: class,
            len: self.classes,
        })
    }

    /// Number of updates the `class` accumulator has absorbed.
    pub fn update_count(&self, id: SampleId, class: usize) -> Result<u64> {
        let entry = self.samples.get(&id).ok_or(Error::Lookup(id.0))?;
        entry.updates.get(class).copied().ok_or(Error::Index {
            index: class,
            len: self.classes,
        })
    }

    pub fn snapshot(&self) -> MarginTable {
        MarginTable(self.clone())
    }

    pub fn restore(table: MarginTable) -> Self {
        table.0
    }
}

/// Serializable image of a [`MarginTracker`].
#[derive(Debug, Clone, PartialEq)]
pub struct MarginTable(MarginTracker);

impl MarginTable {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.encode(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let table = Self::decode(&mut r)?;
        if !r.is_empty() {
            return Err(r.error("trailing bytes after margin table"));
        }
        Ok(table)
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        let t = &self.0;
        w.bytes(MARGIN_TAG);
        w.u8(MARGIN_VERSION);
        match t.rule {
            MarginRule::Ema { delta } => {
                w.u8(0);
                w.f64(delta);
            }
            MarginRule::RunningMean => {
                w.u8(1);
                w.f64(0.0);
            }
        }
        w.u32(t.classes as u32);
        w.u64(t.iteration);
        w.u64(t.samples.len() as u64);
        for (id, s) in &t.samples {
            w.u64(id.0);
            w.f64s(&s.values);
            s.last_update.iter().for_each(|v| w.u64(*v));
            s.updates.iter().for_each(|v| w.u64(*v));
            w.u64(s.last_any.map_or(u64::MAX, |v| v));
        }
    }

    pub(crate) fn decode(r: &mut ByteReader) -> Result<Self> {
        r.expect_tag(MARGIN_TAG)?;
        r.expect_version(MARGIN_VERSION)?;
        let rule_at = r.offset();
        let rule = match (r.u8()?, r.f64()?) {
            (0, delta) => MarginRule::Ema { delta },
            (1, _) => MarginRule::RunningMean,
            (other, _) => {
                return Err(Error::format(
                    format!("byte {rule_at}"),
                    format!("unknown margin rule {other}"),
                ))
            }
        };
        let classes = r.u32()? as usize;
        let mut tracker = MarginTracker::new(classes, rule).map_err(|e| r.error(e.to_string()))?;
        tracker.iteration = r.u64()?;
        let rows = r.u64()?;
        for _ in 0..rows {
            let id = SampleId(r.u64()?);
            let values = r.f64s(classes)?;
            let last_update = (0..classes).map(|_| r.u64()).collect::<Result<_>>()?;
            let updates = (0..classes).map(|_| r.u64()).collect::<Result<_>>()?;
            let last_any = match r.u64()? {
                u64::MAX => None,
                v => Some(v),
            };
            if values.iter().any(|v: &f64| !v.is_finite()) {
                return Err(r.error(format!("non-finite margin for sample {id}")));
            }
            let row = SampleMargins {
                values,
                last_update,
                updates,
                last_any,
            };
            if tracker.samples.insert(id, row).is_some() {
                return Err(r.error(format!("duplicate sample {id}")));
            }
        }
        Ok(MarginTable(tracker))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn pseudo_margin_cases() {
        let z = [2.0, 0.5, -1.0];
        assert_eq!(pseudo_margin(&z, 0).unwrap(), 1.5);
        assert_eq!(pseudo_margin(&z, 2).unwrap(), -3.0);
        let tie = [1.0, 3.0, 3.0];
        assert_eq!(pseudo_margin(&tie, 1).unwrap(), 0.0);
        assert_eq!(pseudo_margin(&tie, 2).unwrap(), 0.0);
        assert!(matches!(pseudo_margin(&[1.0], 0), Err(Error::Domain(_))));
        assert!(matches!(pseudo_margin(&z, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn first_apm_update() {
        let mut t = MarginTracker::apm(3, DEFAULT_DELTA).unwrap();
        t.register(SampleId(4));
        let v = t.update(SampleId(4), &[2.0, 0.5, -1.0], 0, 1).unwrap();
        assert!((v - 0.747_75).abs() < 1e-15);
    }

    #[test]
    fn zero_margins_stay_zero() {
        let mut t = MarginTracker::apm(2, DEFAULT_DELTA).unwrap();
        t.register(SampleId(0));
        for step in 1..=50 {
            t.update(SampleId(0), &[1.0, 1.0], 0, step).unwrap();
        }
        assert_eq!(t.value(SampleId(0), 0).unwrap(), 0.0);
    }

    #[test]
    fn classes_accumulate_independently() {
        let mut t = MarginTracker::apm(2, DEFAULT_DELTA).unwrap();
        let id = SampleId(1);
        t.register(id);
        assert_eq!(t.value(id, 0).unwrap(), 0.0);
        t.update(id, &[0.0, 2.0], 1, 1).unwrap();
        assert_eq!(t.value(id, 0).unwrap(), 0.0);

        // replay: two independent recurrences, each only moving on its own steps
        let mut rng = Rng::new(3);
        let mut expect = [0.0, t.value(id, 1).unwrap()];
        for step in 2..40u64 {
            let class = (step % 2) as usize;
            let z = [rng.normal(), rng.normal()];
            t.update(id, &z, class, step).unwrap();
            let pm = z[class] - z[1 - class];
            let w = DEFAULT_DELTA / (1.0 + step as f64);
            expect[class] = pm * w + expect[class] * (1.0 - w);
            assert_eq!(t.value(id, 0).unwrap(), expect[0]);
            assert_eq!(t.value(id, 1).unwrap(), expect[1]);
        }
    }

    #[test]
    fn lookup_and_ordering_errors() {
        let mut t = MarginTracker::apm(2, DEFAULT_DELTA).unwrap();
        assert!(matches!(t.value(SampleId(9), 0), Err(Error::Lookup(9))));
        assert!(matches!(
            t.update(SampleId(9), &[0.0, 1.0], 0, 1),
            Err(Error::Lookup(9))
        ));
        t.register(SampleId(9));
        t.update(SampleId(9), &[0.0, 1.0], 0, 5).unwrap();
        assert!(matches!(
            t.update(SampleId(9), &[0.0, 1.0], 1, 5),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            t.update(SampleId(9), &[0.0, 1.0], 1, 3),
            Err(Error::Usage(_))
        ));
        assert!(MarginTracker::apm(2, 0.0).is_err());
        assert!(MarginTracker::apm(2, 1.5).is_err());
        assert!(MarginTracker::aum(1).is_err());
    }

    #[test]
    fn aum_is_running_mean() {
        let mut t = MarginTracker::aum(2).unwrap();
        let id = SampleId(0);
        t.register(id);
        t.update(id, &[1.0, 0.0], 0, 1).unwrap();
        t.update(id, &[2.0, 0.0], 0, 2).unwrap();
        assert_eq!(t.value(id, 0).unwrap(), 1.5);

        let mut c = MarginTracker::aum(2).unwrap();
        c.register(id);
        for step in 1..=30 {
            c.update(id, &[0.25, -0.5], 0, step).unwrap();
        }
        assert!((c.value(id, 0).unwrap() - 0.75).abs() < 1e-15);

        let mut rng = Rng::new(17);
        let mut r = MarginTracker::aum(3).unwrap();
        r.register(id);
        let mut margins = Vec::new();
        for step in 1..=50 {
            let z = [rng.normal(), rng.normal(), rng.normal()];
            margins.push(z[1] - z[0].max(z[2]));
            r.update(id, &z, 1, step * 3).unwrap();
        }
        let mean = margins.iter().sum::<f64>() / margins.len() as f64;
        assert!((r.value(id, 1).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn aum_sign_fixtures() {
        let mut t = MarginTracker::aum(3).unwrap();
        let (good, flipped) = (SampleId(0), SampleId(1));
        t.register_all([good, flipped]);
        let mut rng = Rng::new(2);
        for step in 1..=20 {
            // confidently predicts class 0 every time
            let z = [3.0 + rng.uniform(), rng.uniform(), -rng.uniform()];
            t.update(good, &z, 0, step).unwrap();
            // label claims class 2, which is never the argmax
            t.update(flipped, &z, 2, step).unwrap();
        }
        assert!(t.value(good, 0).unwrap() > 0.0);
        assert!(t.value(flipped, 2).unwrap() < 0.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut t = MarginTracker::apm(3, DEFAULT_DELTA).unwrap();
        let mut rng = Rng::new(4);
        t.register_all((0..20).map(SampleId));
        for step in 1..=10 {
            for id in 0..20 {
                if rng.bernoulli(0.6) {
                    let z = [rng.normal(), rng.normal(), rng.normal()];
                    t.update(SampleId(id), &z, rng.below(3), step).unwrap();
                }
            }
        }
        let bytes = t.snapshot().to_bytes();
        let back = MarginTracker::restore(MarginTable::from_bytes(&bytes).unwrap());
        assert_eq!(back, t);
        assert_eq!(back.snapshot().to_bytes(), bytes);

        let empty = MarginTracker::aum(4).unwrap();
        let restored = MarginTracker::restore(MarginTable::from_bytes(&empty.snapshot().to_bytes()).unwrap());
        assert!(restored.is_empty());
        assert_eq!(restored, empty);
    }

    #[test]
    fn snapshot_rejects_bad_version_and_truncation() {
        let t = MarginTracker::aum(2).unwrap();
        let mut bytes = t.snapshot().to_bytes();
        bytes[4] = MARGIN_VERSION + 1;
        let err = MarginTable::from_bytes(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::Format { ref location, .. } if location == "byte 4"),
            "{err}"
        );

        let mut bytes = t.snapshot().to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(
            MarginTable::from_bytes(&bytes),
            Err(Error::Format { .. })
        ));
    }

    /// Closed form of the decaying update: each PM_e enters with weight
    /// w_e · Π_{k>e} (1 - w_k), w_e = δ/(1+e).
    fn unrolled(pms: &[f64], delta: f64) -> (f64, f64) {
        let n = pms.len();
        let w: Vec<f64> = (1..=n).map(|e| delta / (1.0 + e as f64)).collect();
        let mut total = 0.0;
        let mut weight_sum = 0.0;
        for e in 0..n {
            let tail: f64 = w[e + 1..].iter().map(|wk| 1.0 - wk).product();
            total += pms[e] * w[e] * tail;
            weight_sum += w[e] * tail;
        }
        (total, weight_sum)
    }

    proptest! {
        #[test]
        fn ema_matches_unrolled_product(pms in prop::collection::vec(-5.0f64..5.0, 1..120)) {
            let mut t = MarginTracker::apm(2, DEFAULT_DELTA).unwrap();
            t.register(SampleId(0));
            for (e, pm) in pms.iter().enumerate() {
                // logits [pm, 0] give margin pm for class 0
                t.update(SampleId(0), &[*pm, 0.0], 0, e as u64 + 1).unwrap();
            }
            let (expected, weight_sum) = unrolled(&pms, DEFAULT_DELTA);
            prop_assert!((t.value(SampleId(0), 0).unwrap() - expected).abs() < 1e-12);
            let decay: f64 = (1..=pms.len()).map(|e| 1.0 - DEFAULT_DELTA / (1.0 + e as f64)).product();
            prop_assert!((weight_sum - (1.0 - decay)).abs() < 1e-12);
        }

        #[test]
        fn margin_sign_follows_argmax(z in prop::collection::vec(-10.0f64..10.0, 2..10)) {
            let top = crate::numerics::argmax(&z);
            prop_assert!(pseudo_margin(&z, top).unwrap() >= 0.0);
            for c in (0..z.len()).filter(|c| *c != top) {
                prop_assert!(pseudo_margin(&z, c).unwrap() <= 0.0);
            }
        }
    }

    #[test]
    fn fresh_weight_decreases() {
        let w = |t: u64| DEFAULT_DELTA / (1.0 + t as f64);
        assert!((0..1000).all(|t| w(t + 1) < w(t)));
    }
}
