//! One training iteration and the full run loop.
//!
//! Per step, in order:
//!
//! 1. pseudo-label every unlabeled sample from a weak view;
//! 2. update AUM (labeled, ground truth) and APM (unlabeled, pseudo-label)
//!    from those same weak-view logits;
//! 3. split both batches at their median margin;
//! 4. mix easy-labeled with hard-pseudo-labeled and hard-labeled with
//!    easy-pseudo-labeled samples (skipped during warmup);
//! 5. take one SGD step on `L_L + λ_U·L_U + L_mixup`.
//!
//! The mixing and loss composition are selected by [`MixupMode`]; with
//! `MixupMode::None` this is the fixed-threshold pseudo-labeling baseline,
//! and with `λ_U = 0` as well it is plain supervised training.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::augment::{AugmentationSpec, Augmenter};
use crate::calibration::{impurity, sig6, CalibrationReport, PredictionRecord};
use crate::data::{BatchIndices, BatchSampler, Dataset, HiddenLabels, LabeledSet, TestSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::margins::{MarginRule, MarginTracker, SampleId, DEFAULT_DELTA};
use crate::mixup::{
    build_mixup_batch, random_mixup_batch, DifficultySplit, MixCandidate, MixedSample, MixupCounts, Origin,
    PairingConfig, Representation,
};
use crate::model::{Gradients, LrSchedule, Mlp, SgdMomentum};
use crate::numerics::{argmax, soft_cross_entropy, soft_cross_entropy_logit_grad, softmax, ProbVec, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixupMode {
    /// No mixup term.
    #[default]
    None,
    /// Difficulty-aware labeled × pseudo-labeled mixup.
    CalibrateMix,
    /// Uniformly random pairs from the combined labeled + pseudo-labeled pool.
    RandomMixup,
}

/// What the warmup phase switches off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WarmupGate {
    #[default]
    MixupOnly,
    MixupAndUnlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub classes: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Confidence threshold ω.
    pub threshold: f64,
    /// λ_U.
    pub lambda_u: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Pair count for random mixup; the targeted arms produce one pair per
    /// labeled sample instead.
    pub mixup_batch: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub warmup_gate: WarmupGate,
    pub mixup: MixupMode,
    pub pairing: PairingConfig,
    /// Label smoothing factor, applied to labeled, pseudo-label and mixup
    /// parent targets when set.
    pub label_smoothing: Option<f64>,
    /// Only confidence-passing pseudo-labels may enter the mixup pools.
    pub restrict_pools: bool,
    pub apm_delta: f64,
    /// AUM accumulation; the EMA form mirrors APM.
    pub aum_rule: MarginRule,
    pub momentum: f64,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    /// Log (and evaluate) every this many steps; the last step is always logged.
    pub log_every: u64,
    pub eval_bins: usize,
}

impl TrainerConfig {
    /// Defaults for `classes` classes over `steps` steps: ω = 0.95, λ_U = 1,
    /// batches 64 / 448, warmup 10% of the steps.
    pub fn new(classes: usize, steps: u64) -> Self {
        Self {
            classes,
            hidden: vec![64, 64],
            threshold: 0.95,
            lambda_u: 1.0,
            labeled_batch: 64,
            unlabeled_batch: 7 * 64,
            mixup_batch: 64,
            steps,
            warmup_steps: steps / 10,
            warmup_gate: WarmupGate::MixupOnly,
            mixup: MixupMode::None,
            pairing: PairingConfig::default(),
            label_smoothing: None,
            restrict_pools: true,
            apm_delta: DEFAULT_DELTA,
            aum_rule: MarginRule::RunningMean,
            momentum: 0.9,
            learning_rate: 0.03,
            schedule: LrSchedule::HalfCosine,
            log_every: 100,
            eval_bins: crate::calibration::DEFAULT_BINS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Parameter(m));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return fail(format!("threshold {} not in (0, 1]", self.threshold));
        }
        if !(self.lambda_u >= 0.0) {
            return fail(format!("lambda_u {} < 0", self.lambda_u));
        }
        if self.labeled_batch == 0 {
            return fail("labeled batch size is 0".into());
        }
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return fail(format!(
                "warmup {} must be shorter than the run ({} steps)",
                self.warmup_steps, self.steps
            ));
        }
        if let Some(f) = self.label_smoothing {
            if !(0.0..1.0).contains(&f) {
                return fail(format!("label smoothing {f} not in [0, 1)"));
            }
        }
        if self.log_every == 0 {
            return fail("log cadence is 0".into());
        }
        if self.eval_bins == 0 {
            return fail("bin count is 0".into());
        }
        self.pairing.validate()
    }

    fn target(&self, class: usize) -> Result<ProbVec> {
        let one_hot = ProbVec::one_hot(class, self.classes)?;
        match self.label_smoothing {
            Some(f) => label_smooth(&one_hot, f),
            None => Ok(one_hot),
        }
    }
}

/// `(1 - f)·y + f/C`.
pub fn label_smooth(target: &ProbVec, factor: f64) -> Result<ProbVec> {
    if !(0.0..1.0).contains(&factor) {
        return Err(Error::Parameter(format!(
            "smoothing factor {factor} not in [0, 1)"
        )));
    }
    let c = target.len() as f64;
    Ok(ProbVec::from_raw(
        target.iter().map(|y| (1.0 - factor) * y + factor / c).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub class: usize,
    pub confidence: f64,
    /// Weak-view logits the label was read from.
    pub logits: Vec<f64>,
    /// Penultimate activations of the same pass.
    pub features: Vec<f64>,
}

/// Argmax of the weak-view prediction; ties go to the lowest class.
pub fn pseudo_label(model: &Mlp, x: &[f64], aug: &Augmenter, rng: &mut Rng) -> Result<PseudoLabel> {
    let view = aug.weak(x, rng);
    let (logits, cache) = model.forward(&view)?;
    let p = softmax(&logits)?;
    let class = argmax(&p);
    Ok(PseudoLabel {
        class,
        confidence: p[class],
        features: cache.penultimate().to_vec(),
        logits,
    })
}

/// A loss value with the parameter gradient of that same value.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub value: f64,
    pub grads: Gradients,
}

#[derive(Debug, Clone)]
pub struct SupervisedLoss {
    pub term: LossTerm,
    /// Weak-view logits per batch element.
    pub logits: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

/// `L_L`: mean cross-entropy of weak-view predictions against `targets`.
pub fn supervised_loss(
    model: &Mlp,
    inputs: &[&[f64]],
    targets: &[ProbVec],
    aug: &Augmenter,
    rng: &mut Rng,
) -> Result<SupervisedLoss> {
    if inputs.is_empty() {
        return Err(Error::Domain("empty labeled batch".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} inputs, {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let n = inputs.len() as f64;
    let mut grads = Gradients::zeros_like(model);
    let mut value = 0.0;
    let mut logits = Vec::with_capacity(inputs.len());
    let mut features = Vec::with_capacity(inputs.len());
    for (x, target) in inputs.iter().zip(targets) {
        let view = aug.weak(x, rng);
        let (z, cache) = model.forward(&view)?;
        let p = softmax(&z)?;
        value += soft_cross_entropy(target, &p)?;
        let d: Vec<f64> = soft_cross_entropy_logit_grad(target, &p)
            .iter()
            .map(|g| g / n)
            .collect();
        model.backward_into(&cache, &d, &mut grads)?;
        features.push(cache.penultimate().to_vec());
        logits.push(z);
    }
    Ok(SupervisedLoss {
        term: LossTerm {
            value: value / n,
            grads,
        },
        logits,
        features,
    })
}

/// Strong-view half of `L_U`: the masked consistency loss given weak-view
/// pseudo-labels. Normalised by the full batch size.
pub fn consistency_loss(
    model: &Mlp,
    inputs: &[&[f64]],
    pseudo: &[PseudoLabel],
    threshold: f64,
    smoothing: Option<f64>,
    aug: &Augmenter,
    rng: &mut Rng,
) -> Result<(LossTerm, f64)> {
    if inputs.is_empty() {
        return Err(Error::Domain("empty unlabeled batch".into()));
    }
    let n = inputs.len() as f64;
    let classes = model.classes();
    let mut grads = Gradients::zeros_like(model);
    let mut value = 0.0;
    let mut passing = 0usize;
    for (x, pl) in inputs.iter().zip(pseudo) {
        // draw the view even when masked so the stream does not depend on ω
        let view = aug.strong(x, rng);
        if pl.confidence < threshold {
            continue;
        }
        passing += 1;
        let mut target = ProbVec::one_hot(pl.class, classes)?;
        if let Some(f) = smoothing {
            target = label_smooth(&target, f)?;
        }
        let (z, cache) = model.forward(&view)?;
        let p = softmax(&z)?;
        value += soft_cross_entropy(&target, &p)?;
        let d: Vec<f64> = soft_cross_entropy_logit_grad(&target, &p)
            .iter()
            .map(|g| g / n)
            .collect();
        model.backward_into(&cache, &d, &mut grads)?;
    }
    Ok((
        LossTerm {
            value: value / n,
            grads,
        },
        passing as f64 / n,
    ))
}

#[derive(Debug, Clone)]
pub struct UnsupervisedLoss {
    pub term: LossTerm,
    pub mask_rate: f64,
    pub pseudo: Vec<PseudoLabel>,
}

/// `L_U = (1/|D_U|) Σ 1(max p(π(x)) ≥ ω) · H(ŷ, p(Π(x)))`.
pub fn unsupervised_loss(
    model: &Mlp,
    inputs: &[&[f64]],
    threshold: f64,
    aug: &Augmenter,
    rng: &mut Rng,
) -> Result<UnsupervisedLoss> {
    let pseudo = inputs
        .iter()
        .map(|x| pseudo_label(model, x, aug, rng))
        .collect::<Result<Vec<_>>>()?;
    let (term, mask_rate) = consistency_loss(model, inputs, &pseudo, threshold, None, aug, rng)?;
    Ok(UnsupervisedLoss {
        term,
        mask_rate,
        pseudo,
    })
}

/// `L_mixup`: mean cross-entropy on mixed inputs (no augmentation) against
/// their soft labels. Zero for an empty batch.
pub fn mixup_loss(model: &Mlp, mixed: &[MixedSample]) -> Result<LossTerm> {
    let mut grads = Gradients::zeros_like(model);
    if mixed.is_empty() {
        return Ok(LossTerm { value: 0.0, grads });
    }
    let n = mixed.len() as f64;
    let mut value = 0.0;
    for m in mixed {
        let (z, cache) = model.forward(&m.input)?;
        let p = softmax(&z)?;
        value += soft_cross_entropy(&m.label, &p)?;
        let d: Vec<f64> = soft_cross_entropy_logit_grad(&m.label, &p)
            .iter()
            .map(|g| g / n)
            .collect();
        model.backward_into(&cache, &d, &mut grads)?;
    }
    Ok(LossTerm {
        value: value / n,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub lr: f64,
    pub labeled: f64,
    pub unlabeled: f64,
    pub mixup: f64,
    pub lambda_u: f64,
    pub total: f64,
    /// Fraction of the unlabeled batch passing ω.
    pub mask_rate: f64,
    /// Percent of passing pseudo-labels that are wrong; `None` without an
    /// audit source or when nothing passed.
    pub impurity: Option<f64>,
    pub mixed: usize,
    pub pairs: MixupCounts,
    pub split_computed: bool,
}

/// Instrumentation accumulated over a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Counters {
    pub splits_computed: u64,
    pub random_mixup_batches: u64,
    pub mixed_samples: u64,
    pub pairs: MixupCounts,
    pub first_mixup_step: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Mlp,
    pub optimizer: SgdMomentum,
    pub aum: MarginTracker,
    pub apm: MarginTracker,
    pub rng: Rng,
    pub step: u64,
    pub counters: Counters,
}

impl TrainState {
    pub fn new(cfg: &TrainerConfig, input_dim: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.classes);
        let model = Mlp::init(&dims, &mut rng.fork())?;
        let optimizer = SgdMomentum::new(
            &model,
            cfg.momentum,
            cfg.learning_rate,
            cfg.steps.max(1),
            cfg.schedule,
        )?;
        Ok(Self {
            model,
            optimizer,
            aum: MarginTracker::new(cfg.classes, cfg.aum_rule)?,
            apm: MarginTracker::apm(cfg.classes, cfg.apm_delta)?,
            rng: rng.fork(),
            step: 0,
            counters: Counters::default(),
        })
    }
}

/// Inputs to one step.
pub struct StepBatch<'a> {
    pub labeled: &'a LabeledSet,
    pub unlabeled: &'a UnlabeledSet,
    pub indices: &'a BatchIndices,
    /// Audit source for impurity; never consulted by the losses.
    pub hidden: Option<&'a HiddenLabels>,
}

/// Runs one iteration and applies one optimizer step.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainerConfig,
    aug: &Augmenter,
    batch: &StepBatch,
) -> Result<LossBreakdown> {
    let step = state.step;
    if step >= cfg.steps {
        return Err(Error::Usage(format!(
            "step {step} beyond configured {}",
            cfg.steps
        )));
    }
    // margin iteration counter starts at 1
    let t = step + 1;
    let in_warmup = step < cfg.warmup_steps;
    let lr = state.optimizer.lr()?;
    let mut aug_labeled = state.rng.fork();
    let mut aug_weak = state.rng.fork();
    let mut aug_strong = state.rng.fork();
    let mut mix_rng = state.rng.fork();
    let model = &state.model;

    // labeled branch: L_L and the weak-view logits for AUM
    let l_inputs: Vec<&[f64]> = batch
        .indices
        .labeled
        .iter()
        .map(|&i| batch.labeled.inputs[i].as_slice())
        .collect();
    let l_targets = batch
        .indices
        .labeled
        .iter()
        .map(|&i| cfg.target(batch.labeled.labels[i]))
        .collect::<Result<Vec<_>>>()?;
    let sup = supervised_loss(model, &l_inputs, &l_targets, aug, &mut aug_labeled)?;

    // unlabeled branch: pseudo-labels always (they feed APM), L_U unless gated
    let u_inputs: Vec<&[f64]> = batch
        .indices
        .unlabeled
        .iter()
        .map(|&i| batch.unlabeled.inputs[i].as_slice())
        .collect();
    let pseudo = u_inputs
        .iter()
        .map(|x| pseudo_label(model, x, aug, &mut aug_weak))
        .collect::<Result<Vec<_>>>()?;
    let gate_unlabeled = in_warmup && cfg.warmup_gate == WarmupGate::MixupAndUnlabeled;
    let passing = pseudo.iter().filter(|p| p.confidence >= cfg.threshold).count();
    let mask_rate = if pseudo.is_empty() {
        0.0
    } else {
        passing as f64 / pseudo.len() as f64
    };
    let unsup = if u_inputs.is_empty() || gate_unlabeled {
        None
    } else {
        let (term, _) = consistency_loss(
            model,
            &u_inputs,
            &pseudo,
            cfg.threshold,
            cfg.label_smoothing,
            aug,
            &mut aug_strong,
        )?;
        Some(term)
    };

    // training dynamics, one update per distinct sample per step
    let mut seen = HashSet::new();
    for (k, &i) in batch.indices.labeled.iter().enumerate() {
        let id = batch.labeled.ids[i];
        if seen.insert(id) {
            state.aum.register(id);
            state.aum.update(id, &sup.logits[k], batch.labeled.labels[i], t)?;
        }
    }
    seen.clear();
    for (k, &i) in batch.indices.unlabeled.iter().enumerate() {
        let id = batch.unlabeled.ids[i];
        if seen.insert(id) {
            state.apm.register(id);
            state.apm.update(id, &pseudo[k].logits, pseudo[k].class, t)?;
        }
    }

    // mixup
    let mut mixed = Vec::new();
    let mut pairs = MixupCounts::default();
    let mut split_computed = false;
    if !in_warmup && cfg.mixup != MixupMode::None {
        let key = |x: &[f64], features: &[f64]| match cfg.pairing.representation {
            Representation::RawInput => x.to_vec(),
            Representation::Penultimate => features.to_vec(),
        };
        let labeled_cands = batch
            .indices
            .labeled
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let id = batch.labeled.ids[i];
                let y = batch.labeled.labels[i];
                Ok(MixCandidate {
                    id,
                    origin: Origin::Labeled,
                    difficulty: None,
                    input: l_inputs[k].to_vec(),
                    label: l_targets[k].clone(),
                    key: key(l_inputs[k], &sup.features[k]),
                    margin: state.aum.value(id, y)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let unlabeled_cands = batch
            .indices
            .unlabeled
            .iter()
            .enumerate()
            .filter(|(k, _)| !cfg.restrict_pools || pseudo[*k].confidence >= cfg.threshold)
            .map(|(k, &i)| {
                let id = batch.unlabeled.ids[i];
                let pl = &pseudo[k];
                Ok(MixCandidate {
                    id,
                    origin: Origin::Unlabeled,
                    difficulty: None,
                    input: u_inputs[k].to_vec(),
                    label: cfg.target(pl.class)?,
                    key: key(u_inputs[k], &pl.features),
                    margin: state.apm.value(id, pl.class)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match cfg.mixup {
            MixupMode::CalibrateMix => {
                let split = DifficultySplit::new(labeled_cands, unlabeled_cands)?;
                split_computed = true;
                state.counters.splits_computed += 1;
                let (m, counts) = build_mixup_batch(&split, &cfg.pairing, &mut mix_rng)?;
                mixed = m;
                pairs = counts;
            }
            MixupMode::RandomMixup => {
                state.counters.random_mixup_batches += 1;
                mixed = random_mixup_batch(
                    &labeled_cands,
                    &unlabeled_cands,
                    cfg.mixup_batch,
                    cfg.pairing.gamma,
                    &mut mix_rng,
                )?;
            }
            MixupMode::None => unreachable!(),
        }
    }
    let mix = mixup_loss(model, &mixed)?;

    let l_u = unsup.as_ref().map_or(0.0, |u| u.value);
    let total = sup.term.value + cfg.lambda_u * l_u + mix.value;
    let impurity = match batch.hidden {
        Some(hidden) if passing > 0 => {
            let audit: Vec<(SampleId, usize, f64)> = batch
                .indices
                .unlabeled
                .iter()
                .zip(&pseudo)
                .map(|(&i, p)| (batch.unlabeled.ids[i], p.class, p.confidence))
                .collect();
            Some(impurity(&hidden.audit(&audit)?, cfg.threshold).0)
        }
        _ => None,
    };
    let breakdown = LossBreakdown {
        step,
        lr,
        labeled: sup.term.value,
        unlabeled: l_u,
        mixup: mix.value,
        lambda_u: cfg.lambda_u,
        total,
        mask_rate,
        impurity,
        mixed: mixed.len(),
        pairs,
        split_computed,
    };
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "total loss at step {step}: {breakdown:?}"
        )));
    }

    let mut grads = sup.term.grads;
    if let Some(u) = &unsup {
        if cfg.lambda_u != 0.0 {
            grads.add_scaled(&u.grads, cfg.lambda_u);
        }
    }
    grads.add_scaled(&mix.grads, 1.0);
    state.optimizer.step(&mut state.model, &grads)?;

    if !mixed.is_empty() {
        state.counters.first_mixup_step.get_or_insert(step);
    }
    state.counters.mixed_samples += mixed.len() as u64;
    state.counters.pairs.add(&pairs);
    state.step += 1;
    Ok(breakdown)
}

/// Softmax confidence and argmax for every test sample.
pub fn predict(model: &Mlp, test: &TestSet) -> Result<Vec<PredictionRecord>> {
    test.inputs
        .iter()
        .zip(&test.labels)
        .map(|(x, y)| {
            let p = softmax(&model.logits(x)?)?;
            let predicted = argmax(&p);
            Ok(PredictionRecord {
                confidence: p[predicted],
                predicted,
                truth: *y,
            })
        })
        .collect()
}

pub fn evaluate(model: &Mlp, test: &TestSet, bins: usize) -> Result<CalibrationReport> {
    CalibrationReport::new(&predict(model, test)?, bins)
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub loss: LossBreakdown,
    pub test_error: Option<f64>,
    pub test_ece: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,lr,L_L,L_U,L_mixup,total,mask_rate,impurity,test_error,test_ece";

/// Metric log as CSV; missing values are empty fields.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let opt = |v: Option<f64>| v.map(sig6).unwrap_or_default();
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            l.step,
            sig6(l.lr),
            sig6(l.labeled),
            sig6(l.unlabeled),
            sig6(l.mixup),
            sig6(l.total),
            sig6(l.mask_rate),
            opt(l.impurity),
            opt(r.test_error),
            opt(r.test_ece),
        );
    }
    out
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub history: Vec<MetricRow>,
    pub state: TrainState,
    /// Test-set report of the final model; `None` without a test split.
    pub final_report: Option<CalibrationReport>,
}

/// A run that stopped early, with the log up to the failure.
#[derive(Debug, thiserror::Error)]
#[error("training aborted at step {step}: {error}")]
pub struct RunAbort {
    pub step: u64,
    pub error: Error,
    pub history: Vec<MetricRow>,
}

/// Trains for `cfg.steps` steps on an already-split dataset.
///
/// Everything random derives from `seed`, so identical inputs give
/// bit-identical logs and parameters.
pub fn train_run(
    cfg: &TrainerConfig,
    aug_spec: &AugmentationSpec,
    ds: &Dataset,
    seed: u64,
) -> std::result::Result<TrainRun, RunAbort> {
    let abort = |step, error, history| RunAbort { step, error, history };
    let labeled = ds.labeled_set();
    let unlabeled = ds.unlabeled_set();
    let hidden = ds.hidden_labels();
    let test = ds.test_set();
    let mut rng = Rng::new(seed);
    let setup = (|| {
        if ds.classes() > cfg.classes {
            return Err(Error::Parameter(format!(
                "dataset has {} classes, trainer configured for {}",
                ds.classes(),
                cfg.classes
            )));
        }
        let aug = Augmenter::new(*aug_spec, ds.feature_std(), ds.grid())?;
        let state = TrainState::new(cfg, ds.dim(), &mut rng)?;
        let unlabeled_batch = if unlabeled.is_empty() {
            0
        } else {
            cfg.unlabeled_batch
        };
        let sampler = BatchSampler::new(labeled.len(), unlabeled.len(), cfg.labeled_batch, unlabeled_batch)?;
        Ok((aug, state, sampler))
    })();
    let (aug, mut state, mut sampler) = setup.map_err(|e| abort(0, e, Vec::new()))?;
    let mut batch_rng = rng.fork();

    let mut history = Vec::new();
    for step in 0..cfg.steps {
        let indices = sampler.next_batch(&mut batch_rng);
        let batch = StepBatch {
            labeled: &labeled,
            unlabeled: &unlabeled,
            indices: &indices,
            hidden: Some(&hidden),
        };
        let loss = match train_step(&mut state, cfg, &aug, &batch) {
            Ok(l) => l,
            Err(e) => return Err(abort(step, e, history)),
        };
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let report = if test.inputs.is_empty() {
                None
            } else {
                match evaluate(&state.model, &test, cfg.eval_bins) {
                    Ok(r) => Some(r),
                    Err(e) => return Err(abort(step, e, history)),
                }
            };
            history.push(MetricRow {
                loss,
                test_error: report.as_ref().map(|r| r.error_rate),
                test_ece: report.as_ref().map(|r| r.ece),
            });
        }
    }
    let final_report = if test.inputs.is_empty() {
        None
    } else {
        Some(evaluate(&state.model, &test, cfg.eval_bins).map_err(|e| abort(cfg.steps, e, history.clone()))?)
    };
    Ok(TrainRun {
        history,
        state,
        final_report,
    })
}
