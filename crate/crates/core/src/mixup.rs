//! Difficulty-aware pairing and mixing.
//!
//! A batch is split at the median margin into easy (margin ≥ τ) and hard
//! (margin < τ) halves, separately for labeled samples (AUM, τ_L) and for
//! pseudo-labeled samples (APM, τ_U). Each easy labeled sample is mixed with
//! one of its most dissimilar hard pseudo-labeled samples, and each hard
//! labeled sample with one of its most dissimilar easy pseudo-labeled
//! samples. The labeled parent always takes the weight γ.

use std::fmt;

use crate::error::{Error, Result};
use crate::margins::SampleId;
use crate::numerics::{batch_median, cosine_dissimilarity, norm, sample_beta, ProbVec, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Hard,
}

/// Provenance of one parent of a mixed sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParentRef {
    pub id: SampleId,
    pub origin: Origin,
    pub difficulty: Option<Difficulty>,
}

impl fmt::Display for ParentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = match self.origin {
            Origin::Labeled => 'L',
            Origin::Unlabeled => 'U',
        };
        let d = match self.difficulty {
            Some(Difficulty::Easy) => "E",
            Some(Difficulty::Hard) => "H",
            None => "",
        };
        write!(f, "{o}{d}#{}", self.id)
    }
}

/// A sample eligible for mixing, with the vector used to rank dissimilarity.
#[derive(Debug, Clone, PartialEq)]
pub struct MixCandidate {
    pub id: SampleId,
    pub origin: Origin,
    pub difficulty: Option<Difficulty>,
    pub input: Vec<f64>,
    /// One-hot (or smoothed) ground truth for labeled, pseudo-label otherwise.
    pub label: ProbVec,
    /// Representation compared by cosine dissimilarity.
    pub key: Vec<f64>,
    /// AUM for labeled candidates, APM of the current pseudo-label otherwise.
    pub margin: f64,
}

impl MixCandidate {
    pub fn parent_ref(&self) -> ParentRef {
        ParentRef {
            id: self.id,
            origin: self.origin,
            difficulty: self.difficulty,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub input: Vec<f64>,
    pub label: ProbVec,
    /// Weight of the first parent, exactly as drawn.
    pub gamma: f64,
    pub parents: [ParentRef; 2],
}

/// Indices of one side of a batch split at its median margin.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitHalf {
    pub threshold: f64,
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
}

/// Splits at the batch median: `margin ≥ τ` is easy, the rest hard.
pub fn split_by_median(margins: &[f64]) -> Result<SplitHalf> {
    if margins.iter().any(|m| !m.is_finite()) {
        return Err(Error::Numeric("non-finite margin in batch".into()));
    }
    let threshold = batch_median(margins)?;
    let (easy, hard) = (0..margins.len()).partition(|&i| margins[i] >= threshold);
    Ok(SplitHalf {
        threshold,
        easy,
        hard,
    })
}

/// The four difficulty pools of one iteration and their thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultySplit {
    pub labeled_easy: Vec<MixCandidate>,
    pub labeled_hard: Vec<MixCandidate>,
    pub unlabeled_easy: Vec<MixCandidate>,
    pub unlabeled_hard: Vec<MixCandidate>,
    pub tau_labeled: f64,
    /// `None` when no pseudo-labeled candidate was available.
    pub tau_unlabeled: Option<f64>,
}

impl DifficultySplit {
    /// Partitions both candidate lists by their own batch median and tags
    /// each candidate with its difficulty.
    pub fn new(labeled: Vec<MixCandidate>, unlabeled: Vec<MixCandidate>) -> Result<Self> {
        if labeled.iter().any(|c| c.origin != Origin::Labeled)
            || unlabeled.iter().any(|c| c.origin != Origin::Unlabeled)
        {
            return Err(Error::Usage("candidate placed in the wrong pool".into()));
        }
        let (labeled_easy, labeled_hard, tau_labeled) = split_candidates(labeled)?;
        let (unlabeled_easy, unlabeled_hard, tau_unlabeled) = if unlabeled.is_empty() {
            (Vec::new(), Vec::new(), None)
        } else {
            let (e, h, t) = split_candidates(unlabeled)?;
            (e, h, Some(t))
        };
        Ok(Self {
            labeled_easy,
            labeled_hard,
            unlabeled_easy,
            unlabeled_hard,
            tau_labeled,
            tau_unlabeled,
        })
    }
}

fn split_candidates(candidates: Vec<MixCandidate>) -> Result<(Vec<MixCandidate>, Vec<MixCandidate>, f64)> {
    let margins: Vec<f64> = candidates.iter().map(|c| c.margin).collect();
    let half = split_by_median(&margins)?;
    let mut easy = Vec::with_capacity(half.easy.len());
    let mut hard = Vec::with_capacity(half.hard.len());
    for mut c in candidates {
        if c.margin >= half.threshold {
            c.difficulty = Some(Difficulty::Easy);
            easy.push(c);
        } else {
            c.difficulty = Some(Difficulty::Hard);
            hard.push(c);
        }
    }
    Ok((easy, hard, half.threshold))
}

/// Picks uniformly among the `max(1, ⌈k%·|pool|⌉)` pool entries most
/// dissimilar to `anchor`. Equal dissimilarities rank by ascending index.
pub fn topk_dissimilar<T: AsRef<[f64]>>(
    anchor: &[f64],
    pool: &[T],
    k_percent: f64,
    rng: &mut Rng,
) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::Domain("top-k selection from an empty pool".into()));
    }
    if !(0.0..=100.0).contains(&k_percent) {
        return Err(Error::Parameter(format!("k = {k_percent}% outside [0, 100]")));
    }
    let top = top_set_size(k_percent, pool.len());
    let mut ranked = pool
        .iter()
        .enumerate()
        .map(|(i, p)| cosine_dissimilarity(anchor, p.as_ref()).map(|d| (i, d)))
        .collect::<Result<Vec<_>>>()?;
    // stable sort keeps ascending index among ties
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked[rng.below(top)].0)
}

/// `max(1, ⌈k/100 · n⌉)`, capped at `n`.
pub fn top_set_size(k_percent: f64, n: usize) -> usize {
    // k·n first: 0.05 · 40 would round up to 2.0000000000000004
    let m = (k_percent * n as f64 / 100.0).ceil() as usize;
    m.clamp(1, n)
}

/// `γ·a + (1-γ)·b` on inputs and labels; `a` is the labeled parent in the
/// targeted arms.
pub fn mix_pair(a: &MixCandidate, b: &MixCandidate, gamma: f64) -> Result<MixedSample> {
    if a.input.len() != b.input.len() {
        return Err(Error::Dimension(format!(
            "mixing inputs of length {} and {}",
            a.input.len(),
            b.input.len()
        )));
    }
    if a.label.len() != b.label.len() {
        return Err(Error::Dimension(format!(
            "mixing labels over {} and {} classes",
            a.label.len(),
            b.label.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("mixing weight {gamma} outside [0, 1]")));
    }
    Ok(MixedSample {
        input: convex(&a.input, &b.input, gamma),
        label: ProbVec::from_raw(convex(&a.label, &b.label, gamma)),
        gamma,
        parents: [a.parent_ref(), b.parent_ref()],
    })
}

fn convex(a: &[f64], b: &[f64], gamma: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| (gamma * x + (1.0 - gamma) * y).clamp(x.min(*y), x.max(*y)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaMode {
    /// Fresh γ ~ Beta(α, α) for every pair.
    Beta { alpha: f64 },
    /// The same γ for every pair.
    Fixed(f64),
}

impl GammaMode {
    pub fn draw(&self, rng: &mut Rng) -> Result<f64> {
        match *self {
            GammaMode::Beta { alpha } => sample_beta(alpha, rng),
            GammaMode::Fixed(g) if (0.0..=1.0).contains(&g) => Ok(g),
            GammaMode::Fixed(g) => Err(Error::Parameter(format!("fixed gamma {g}"))),
        }
    }
}

/// Which vector feeds the dissimilarity ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Representation {
    #[default]
    RawInput,
    Penultimate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairingConfig {
    /// Size of the candidate set as a percentage of the pool. Zero disables
    /// the dissimilarity ranking: partners are drawn uniformly.
    pub k_percent: f64,
    pub gamma: GammaMode,
    pub representation: Representation,
    /// Also mix LE with LH and UE with UH (ablation only).
    pub mix_all: bool,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            k_percent: 5.0,
            gamma: GammaMode::Beta { alpha: 0.4 },
            representation: Representation::RawInput,
            mix_all: false,
        }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.k_percent) {
            return Err(Error::Parameter(format!(
                "k = {}% outside [0, 100]",
                self.k_percent
            )));
        }
        match self.gamma {
            GammaMode::Beta { alpha } if !(alpha > 0.0) => {
                Err(Error::Parameter(format!("alpha {alpha} must be > 0")))
            }
            GammaMode::Fixed(g) if !(0.0..=1.0).contains(&g) => {
                Err(Error::Parameter(format!("fixed gamma {g} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Pair-type counts of one mixup batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MixupCounts {
    pub le_uh: usize,
    pub lh_ue: usize,
    pub le_lh: usize,
    pub ue_uh: usize,
    /// Targeted arms skipped because their partner pool was empty.
    pub skipped_arms: usize,
    /// Candidates whose dissimilarity key had zero norm.
    pub zero_norm_keys: usize,
}

impl MixupCounts {
    pub fn total(&self) -> usize {
        self.le_uh + self.lh_ue + self.le_lh + self.ue_uh
    }

    pub fn add(&mut self, other: &MixupCounts) {
        self.le_uh += other.le_uh;
        self.lh_ue += other.lh_ue;
        self.le_lh += other.le_lh;
        self.ue_uh += other.ue_uh;
        self.skipped_arms += other.skipped_arms;
        self.zero_norm_keys += other.zero_norm_keys;
    }
}

fn pick_partner(
    anchor: &MixCandidate,
    pool: &[MixCandidate],
    cfg: &PairingConfig,
    rng: &mut Rng,
) -> Result<usize> {
    if cfg.k_percent == 0.0 {
        return Ok(rng.below(pool.len()));
    }
    let keys: Vec<&[f64]> = pool.iter().map(|c| c.key.as_slice()).collect();
    topk_dissimilar(&anchor.key, &keys, cfg.k_percent, rng)
}

fn mix_arm(
    anchors: &[MixCandidate],
    pool: &[MixCandidate],
    cfg: &PairingConfig,
    rng: &mut Rng,
    out: &mut Vec<MixedSample>,
) -> Result<usize> {
    if anchors.is_empty() || pool.is_empty() {
        return Ok(0);
    }
    for a in anchors {
        let j = pick_partner(a, pool, cfg, rng)?;
        let gamma = cfg.gamma.draw(rng)?;
        out.push(mix_pair(a, &pool[j], gamma)?);
    }
    Ok(anchors.len())
}

/// Builds the targeted mixup batch `D_M = Mix(LE, UH) + Mix(LH, UE)`.
///
/// An arm whose partner pool is empty produces nothing and is counted in
/// [`MixupCounts::skipped_arms`].
pub fn build_mixup_batch(
    split: &DifficultySplit,
    cfg: &PairingConfig,
    rng: &mut Rng,
) -> Result<(Vec<MixedSample>, MixupCounts)> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut counts = MixupCounts {
        zero_norm_keys: [
            &split.labeled_easy,
            &split.labeled_hard,
            &split.unlabeled_easy,
            &split.unlabeled_hard,
        ]
        .iter()
        .flat_map(|p| p.iter())
        .filter(|c| norm(&c.key) == 0.0)
        .count(),
        ..Default::default()
    };

    for (anchors, pool) in [
        (&split.labeled_easy, &split.unlabeled_hard),
        (&split.labeled_hard, &split.unlabeled_easy),
    ] {
        if !anchors.is_empty() && pool.is_empty() {
            counts.skipped_arms += 1;
        }
    }
    counts.le_uh = mix_arm(&split.labeled_easy, &split.unlabeled_hard, cfg, rng, &mut out)?;
    counts.lh_ue = mix_arm(&split.labeled_hard, &split.unlabeled_easy, cfg, rng, &mut out)?;
    if cfg.mix_all {
        counts.le_lh = mix_arm(&split.labeled_easy, &split.labeled_hard, cfg, rng, &mut out)?;
        counts.ue_uh = mix_arm(&split.unlabeled_easy, &split.unlabeled_hard, cfg, rng, &mut out)?;
    }
    Ok((out, counts))
}

/// Undirected mixup: `pairs` uniformly random pairs of distinct samples from
/// the combined labeled + pseudo-labeled pool, no difficulty structure.
pub fn random_mixup_batch(
    labeled: &[MixCandidate],
    unlabeled: &[MixCandidate],
    pairs: usize,
    gamma: GammaMode,
    rng: &mut Rng,
) -> Result<Vec<MixedSample>> {
    let n = labeled.len() + unlabeled.len();
    if n < 2 {
        return Err(Error::Domain(format!(
            "random mixup needs at least 2 samples, got {n}"
        )));
    }
    let get = |i: usize| {
        if i < labeled.len() {
            &labeled[i]
        } else {
            &unlabeled[i - labeled.len()]
        }
    };
    (0..pairs)
        .map(|_| {
            let i = rng.below(n);
            let mut j = rng.below(n - 1);
            if j >= i {
                j += 1;
            }
            let g = gamma.draw(rng)?;
            mix_pair(get(i), get(j), g)
        })
        .collect()
}
