//! Small dense-math helpers, probability transforms and the seeded RNG.
//!
//! Everything is `f64`. Calibration gaps are small enough that `f32` drift
//! shows up in the oracle comparisons.

use std::ops::Deref;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Lower clamp applied to predicted probabilities before taking a log.
pub const LOG_CLAMP: f64 = 1e-12;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    /// Tolerance on the sum of entries.
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("empty probability vector".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Domain(format!("entries outside [0, 1]: {values:?}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Domain(format!("entries sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn one_hot(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::Index {
                index: class,
                len: classes,
            });
        }
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Ok(Self(v))
    }

    /// Class with the largest mass; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl Deref for ProbVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Result<ProbVec> {
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of empty vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric(format!("softmax input {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(ProbVec(out))
}

/// `-Σ_c target_c · ln(max(pred_c, ε))`.
pub fn soft_cross_entropy(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "target has {} classes, prediction has {}",
            target.len(),
            pred.len()
        )));
    }
    Ok(target
        .iter()
        .zip(pred)
        .map(|(t, p)| -t * p.max(LOG_CLAMP).ln())
        .sum())
}

/// Gradient of [`soft_cross_entropy`] with respect to the logits that
/// produced `pred` through a softmax. Classes whose probability sits under
/// the log clamp contribute a constant to the loss and nothing here.
pub fn soft_cross_entropy_logit_grad(target: &[f64], pred: &[f64]) -> Vec<f64> {
    let live_mass: f64 = target
        .iter()
        .zip(pred)
        .filter(|(_, p)| **p >= LOG_CLAMP)
        .map(|(t, _)| t)
        .sum();
    target
        .iter()
        .zip(pred)
        .map(|(t, p)| live_mass * p - if *p >= LOG_CLAMP { *t } else { 0.0 })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `1 - cos(a, b)`, in `[0, 2]`.
///
/// A zero-norm operand has no direction; it is treated as neutral and scores
/// exactly 1. Callers that care can detect that case with [`norm`].
pub fn cosine_dissimilarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine between lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(1.0);
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

pub fn batch_median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("median of empty batch".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

/// Seeded, platform-independent random stream (ChaCha8).
///
/// One owner at a time; use [`Rng::fork`] to hand independent streams to
/// sub-tasks.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives a new independent stream, advancing this one.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `ln` of a Gamma(shape, 1) draw (Marsaglia–Tsang, boosted for shape < 1).
    fn ln_gamma_draw(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            // G(a) = G(a + 1) · U^(1/a); kept in log space so small shapes
            // don't underflow to zero.
            let u = loop {
                let u = self.uniform();
                if u > 0.0 {
                    break u;
                }
            };
            return self.ln_gamma_draw(shape + 1.0) + u.ln() / shape;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform();
            if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return (d * v).ln();
            }
        }
    }
}

/// Draws from the symmetric Beta(alpha, alpha); the result is strictly
/// inside `(0, 1)`.
pub fn sample_beta(alpha: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("beta alpha must be > 0, got {alpha}")));
    }
    loop {
        let ln_x = rng.ln_gamma_draw(alpha);
        let ln_y = rng.ln_gamma_draw(alpha);
        let g = 1.0 / (1.0 + (ln_y - ln_x).exp());
        if g > 0.0 && g < 1.0 {
            return Ok(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_known_values() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(&*p, &[0.5, 0.5]);

        // 40-digit reference values
        let expected = [
            0.090_030_573_170_380_457_998_022_104_5,
            0.244_728_471_054_797_652_472_959_618_3,
            0.665_240_955_774_821_889_529_018_280_2,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[]), Err(Error::Dimension(_))));
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert!(matches!(softmax(&[f64::INFINITY]), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_saturates_without_overflow() {
        let p = softmax(&[1000.0, -1000.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(soft_cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= 1e-11);
        let uniform = soft_cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((uniform - std::f64::consts::LN_2).abs() < 1e-15);
        let v = soft_cross_entropy(&[0.4, 0.6], &[0.7, 0.3]).unwrap();
        assert!((v - 0.865_053_660_171_054_547_138_703_215_2).abs() < 1e-15);
        assert!(matches!(
            soft_cross_entropy(&[1.0], &[0.5, 0.5]),
            Err(Error::Dimension(_))
        ));
        // one-hot against a zero probability is capped by the clamp
        let capped = soft_cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((capped - (-LOG_CLAMP.ln())).abs() < 1e-12);
    }

    #[test]
    fn logit_grad_matches_finite_differences() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let t = [0.1, 0.2, 0.6, 0.1];
        let p = softmax(&z).unwrap();
        let g = soft_cross_entropy_logit_grad(&t, &p);
        let h = 1e-6;
        for j in 0..z.len() {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let lp = soft_cross_entropy(&t, &softmax(&zp).unwrap()).unwrap();
            let lm = soft_cross_entropy(&t, &softmax(&zm).unwrap()).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-8, "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_dissimilarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_dissimilarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(cosine_dissimilarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert_eq!(cosine_dissimilarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!(cosine_dissimilarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn median_cases() {
        assert!((batch_median(&[0.1, 0.5, 0.9, 0.3]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(batch_median(&[7.0]).unwrap(), 7.0);
        assert_eq!(batch_median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert!(matches!(batch_median(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn beta_rejects_nonpositive_alpha() {
        let mut rng = Rng::new(0);
        assert!(matches!(sample_beta(0.0, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(sample_beta(-1.0, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = Rng::new(11);
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n).map(|_| sample_beta(1.0, &mut rng).unwrap()).collect();
        draws.sort_by(f64::total_cmp);
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (x - lo).abs().max((hi - x).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn beta_point_four_moments() {
        let mut rng = Rng::new(12);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_beta(0.4, &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|g| *g > 0.0 && *g < 1.0));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n as f64;
        // Beta(a, a) variance: 1 / (4 (2a + 1))
        let expected_var = 1.0 / (4.0 * (2.0 * 0.4 + 1.0));
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var - expected_var).abs() < 0.005, "var {var}");
        assert!((expected_var - 0.1389).abs() < 1e-4);
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let xs: Vec<u64> = (0..5)
            .map(|_| sample_beta(0.4, &mut a).unwrap().to_bits())
            .collect();
        let ys: Vec<u64> = (0..5)
            .map(|_| sample_beta(0.4, &mut b).unwrap().to_bits())
            .collect();
        assert_eq!(xs, ys);
    }

    fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            z in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&z).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn gibbs_inequality((t, p) in (2usize..8).prop_flat_map(|n| (simplex(n), simplex(n)))) {
            let self_ce = soft_cross_entropy(&t, &t).unwrap();
            let cross = soft_cross_entropy(&t, &p).unwrap();
            prop_assert!(self_ce <= cross + 1e-9);
        }

        #[test]
        fn cosine_symmetric_and_bounded(
            (a, b) in (1usize..10).prop_flat_map(|n| (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(-5.0f64..5.0, n),
            ))
        ) {
            let ab = cosine_dissimilarity(&a, &b).unwrap();
            let ba = cosine_dissimilarity(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&ab));
        }
    }
}
