//! Named mode overrides for comparison suites.
//!
//! An arm only touches trainer mode flags; data, splits, seeds and every
//! other hyperparameter come from the base config.

use crate::config::{Mode, TrainerSection};
use crate::error::{CliError, Result};

type Override = fn(&mut TrainerSection);

const ARMS: &[(&str, Override)] = &[
    ("base", |_| {}),
    ("supervised", |t| {
        t.mode = Some(Mode::None);
        t.lambda_u = Some(0.0);
    }),
    ("fixmatch", |t| t.mode = Some(Mode::None)),
    ("label-smoothing", |t| {
        t.mode = Some(Mode::None);
        t.label_smoothing = Some(0.1);
    }),
    ("random-mixup", |t| t.mode = Some(Mode::RandomMixup)),
    ("calibratemix", |t| t.mode = Some(Mode::Calibratemix)),
    ("calibratemix-ls", |t| {
        t.mode = Some(Mode::Calibratemix);
        t.label_smoothing = Some(0.1);
    }),
    ("no-warmup", |t| {
        t.mode = Some(Mode::Calibratemix);
        no_warmup(t);
    }),
    ("mixup-all", |t| {
        t.mode = Some(Mode::Calibratemix);
        t.mix_all = Some(true);
    }),
    ("mixup-all-no-warmup", |t| {
        t.mode = Some(Mode::Calibratemix);
        t.mix_all = Some(true);
        no_warmup(t);
    }),
    ("k0", |t| {
        t.mode = Some(Mode::Calibratemix);
        t.k = Some(0.0);
    }),
    ("k10", |t| {
        t.mode = Some(Mode::Calibratemix);
        t.k = Some(10.0);
    }),
    ("k15", |t| {
        t.mode = Some(Mode::Calibratemix);
        t.k = Some(15.0);
    }),
];

fn no_warmup(t: &mut TrainerSection) {
    t.warmup_fraction = None;
    t.warmup_steps = Some(0);
}

pub fn names() -> Vec<&'static str> {
    ARMS.iter().map(|(n, _)| *n).collect()
}

/// `base` with the named arm's overrides applied.
pub fn apply(name: &str, base: &TrainerSection) -> Result<TrainerSection> {
    let (_, f) = ARMS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| CliError::UnknownArm(name.to_string()))?;
    let mut t = base.clone();
    f(&mut t);
    Ok(t)
}
