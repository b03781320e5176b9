//! Weak and strong input perturbations.
//!
//! Plain feature vectors: weak adds Gaussian jitter scaled by each
//! feature's spread; strong adds heavier jitter and zeroes random features.
//! Flattened images: weak is a random horizontal flip plus a small
//! translation; strong adds heavier jitter and erases a square patch.

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    /// Weak jitter, as a multiple of each feature's standard deviation.
    pub weak_jitter: f64,
    /// Strong jitter, same units.
    pub strong_jitter: f64,
    /// Probability of zeroing a feature in the strong view.
    pub strong_dropout: f64,
    /// Grid inputs only.
    pub flip: bool,
    /// Grid inputs only.
    pub shift: bool,
    /// Grid inputs only: erase a square patch in the strong view.
    pub erase: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            weak_jitter: 0.05,
            strong_jitter: 0.2,
            strong_dropout: 0.2,
            flip: true,
            shift: true,
            erase: true,
        }
    }
}

impl AugmentationSpec {
    /// No perturbation at all, for tests and exact-reference runs.
    pub fn identity() -> Self {
        Self {
            weak_jitter: 0.0,
            strong_jitter: 0.0,
            strong_dropout: 0.0,
            flip: false,
            shift: false,
            erase: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_jitter >= 0.0) {
            return Err(Error::Parameter(format!("weak jitter {} < 0", self.weak_jitter)));
        }
        if self.strong_jitter < self.weak_jitter {
            return Err(Error::Parameter(format!(
                "strong jitter {} below weak jitter {}",
                self.strong_jitter, self.weak_jitter
            )));
        }
        if !(0.0..1.0).contains(&self.strong_dropout) {
            return Err(Error::Parameter(format!(
                "dropout probability {} not in [0, 1)",
                self.strong_dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Augmenter {
    spec: AugmentationSpec,
    scale: Vec<f64>,
    grid: Option<(usize, usize)>,
}

impl Augmenter {
    /// `scale` is the per-feature spread that jitter is expressed in.
    pub fn new(spec: AugmentationSpec, scale: Vec<f64>, grid: Option<(usize, usize)>) -> Result<Self> {
        spec.validate()?;
        if let Some((r, c)) = grid {
            if r * c != scale.len() {
                return Err(Error::Dimension(format!(
                    "grid {r}x{c} for {} features",
                    scale.len()
                )));
            }
        }
        Ok(Self { spec, scale, grid })
    }

    pub fn spec(&self) -> &AugmentationSpec {
        &self.spec
    }

    fn jitter(&self, x: &mut [f64], sigma: f64, rng: &mut Rng) {
        if sigma == 0.0 {
            return;
        }
        for (v, s) in x.iter_mut().zip(&self.scale) {
            *v += sigma * s * rng.normal();
        }
    }

    fn flip_shift(&self, x: &[f64], rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
        let flip = self.spec.flip && rng.bernoulli(0.5);
        let (dy, dx) = if self.spec.shift {
            let max_dy = (rows as f64 / 8.0).round().max(1.0) as i64;
            let max_dx = (cols as f64 / 8.0).round().max(1.0) as i64;
            (
                rng.below((2 * max_dy + 1) as usize) as i64 - max_dy,
                rng.below((2 * max_dx + 1) as usize) as i64 - max_dx,
            )
        } else {
            (0, 0)
        };
        let mut out = vec![0.0; x.len()];
        for r in 0..rows as i64 {
            for c in 0..cols as i64 {
                let (sr, sc) = (r - dy, c - dx);
                if sr < 0 || sc < 0 || sr >= rows as i64 || sc >= cols as i64 {
                    continue;
                }
                let sc = if flip { cols as i64 - 1 - sc } else { sc };
                out[(r * cols as i64 + c) as usize] = x[(sr * cols as i64 + sc) as usize];
            }
        }
        out
    }

    /// π: the light view used for pseudo-labels and the supervised loss.
    pub fn weak(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        match self.grid {
            Some((rows, cols)) => self.flip_shift(x, rows, cols, rng),
            None => {
                let mut out = x.to_vec();
                self.jitter(&mut out, self.spec.weak_jitter, rng);
                out
            }
        }
    }

    /// Π: the heavy view the consistency loss is computed on.
    pub fn strong(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        match self.grid {
            Some((rows, cols)) => {
                let mut out = self.flip_shift(x, rows, cols, rng);
                self.jitter(&mut out, self.spec.strong_jitter, rng);
                if self.spec.erase {
                    let side = (rows.min(cols) / 4).max(1);
                    let top = rng.below(rows - side + 1);
                    let left = rng.below(cols - side + 1);
                    for r in top..top + side {
                        out[r * cols + left..r * cols + left + side].fill(0.0);
                    }
                }
                out
            }
            None => {
                let mut out = x.to_vec();
                self.jitter(&mut out, self.spec.strong_jitter, rng);
                if self.spec.strong_dropout > 0.0 {
                    for v in out.iter_mut() {
                        if rng.bernoulli(self.spec.strong_dropout) {
                            *v = 0.0;
                        }
                    }
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_spec_is_a_no_op() {
        let aug = Augmenter::new(AugmentationSpec::identity(), vec![1.0; 3], None).unwrap();
        let mut rng = Rng::new(0);
        let x = [0.5, -1.0, 2.0];
        assert_eq!(aug.weak(&x, &mut rng), x);
        assert_eq!(aug.strong(&x, &mut rng), x);
    }

    #[test]
    fn jitter_scales_with_feature_spread() {
        let aug = Augmenter::new(AugmentationSpec::default(), vec![1.0, 0.0], None).unwrap();
        let mut rng = Rng::new(1);
        let n = 20_000;
        let mut sq = 0.0;
        for _ in 0..n {
            let w = aug.weak(&[0.0, 3.0], &mut rng);
            assert_eq!(w[1], 3.0);
            sq += w[0] * w[0];
        }
        let std = (sq / n as f64).sqrt();
        assert!((std - 0.05).abs() < 0.002, "{std}");
    }

    #[test]
    fn strong_drops_features() {
        let aug = Augmenter::new(AugmentationSpec::default(), vec![0.0; 1000], None).unwrap();
        let s = aug.strong(&vec![1.0; 1000], &mut Rng::new(2));
        let dropped = s.iter().filter(|v| **v == 0.0).count();
        assert!((150..250).contains(&dropped), "{dropped}");
    }

    #[test]
    fn grid_views_keep_shape_and_erase() {
        let aug = Augmenter::new(AugmentationSpec::default(), vec![0.0; 64], Some((8, 8))).unwrap();
        let mut rng = Rng::new(3);
        let x: Vec<f64> = (1..=64).map(|v| v as f64).collect();
        let w = aug.weak(&x, &mut rng);
        assert_eq!(w.len(), 64);
        // flip+shift only moves (or drops) pixel values
        assert!(w.iter().all(|v| *v == 0.0 || x.contains(v)));
        let s = aug.strong(&x, &mut rng);
        assert!(s.iter().filter(|v| **v == 0.0).count() >= 4);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = AugmentationSpec::default();
        spec.strong_jitter = 0.01;
        assert!(spec.validate().is_err());
        let mut spec = AugmentationSpec::default();
        spec.strong_dropout = 1.0;
        assert!(spec.validate().is_err());
        assert!(Augmenter::new(AugmentationSpec::default(), vec![1.0; 5], Some((2, 2))).is_err());
    }
}
