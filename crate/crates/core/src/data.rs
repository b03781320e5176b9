//! Datasets, semi-supervised splits and batch sampling.
//!
//! Unlabeled samples keep their true labels, but only behind
//! [`HiddenLabels`], whose sole output is an audit record for the
//! calibration diagnostics. [`UnlabeledSet`] carries no labels at all.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::calibration::PseudoLabelRecord;
use crate::error::{Error, Result};
use crate::margins::SampleId;
use crate::numerics::Rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Unassigned,
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    tags: Vec<SplitTag>,
    /// `(rows, cols)` when inputs are flattened images.
    grid: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            if let Some(i) = inputs.iter().position(|x| x.len() != first.len()) {
                return Err(Error::Dimension(format!(
                    "sample {i} has {} features, expected {}",
                    inputs[i].len(),
                    first.len()
                )));
            }
        }
        if let Some(i) = labels.iter().position(|y| *y >= classes) {
            return Err(Error::Index {
                index: labels[i],
                len: classes,
            });
        }
        if inputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset contains non-finite features".into()));
        }
        let n = inputs.len();
        Ok(Self {
            inputs,
            labels,
            classes,
            tags: vec![SplitTag::Unassigned; n],
            grid: None,
        })
    }

    pub fn with_grid(mut self, rows: usize, cols: usize) -> Result<Self> {
        if self.dim() != rows * cols {
            return Err(Error::Dimension(format!(
                "grid {rows}x{cols} for {} features",
                self.dim()
            )));
        }
        self.grid = Some((rows, cols));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn tags(&self) -> &[SplitTag] {
        &self.tags
    }

    /// All inputs regardless of split, e.g. for geometry checks.
    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    /// Per-class sample counts over the whole dataset.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|y| counts[*y] += 1);
        counts
    }

    /// Ground truth of every sample. Only valid before a split is applied;
    /// afterwards use the split-specific views.
    pub fn unsplit_labels(&self) -> Result<&[usize]> {
        if self.tags.iter().any(|t| *t != SplitTag::Unassigned) {
            return Err(Error::Usage(
                "dataset already split; labels are quarantined".into(),
            ));
        }
        Ok(&self.labels)
    }

    fn indices(&self, tag: SplitTag) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |i| self.tags[*i] == tag)
    }

    pub fn labeled_set(&self) -> LabeledSet {
        let idx: Vec<usize> = self.indices(SplitTag::Labeled).collect();
        LabeledSet {
            ids: idx.iter().map(|i| SampleId(*i as u64)).collect(),
            inputs: idx.iter().map(|i| self.inputs[*i].clone()).collect(),
            labels: idx.iter().map(|i| self.labels[*i]).collect(),
        }
    }

    pub fn unlabeled_set(&self) -> UnlabeledSet {
        let idx: Vec<usize> = self.indices(SplitTag::Unlabeled).collect();
        UnlabeledSet {
            ids: idx.iter().map(|i| SampleId(*i as u64)).collect(),
            inputs: idx.iter().map(|i| self.inputs[*i].clone()).collect(),
        }
    }

    pub fn hidden_labels(&self) -> HiddenLabels {
        HiddenLabels {
            truth: self
                .indices(SplitTag::Unlabeled)
                .map(|i| (SampleId(i as u64), self.labels[i]))
                .collect(),
        }
    }

    pub fn test_set(&self) -> TestSet {
        let idx: Vec<usize> = self.indices(SplitTag::Test).collect();
        TestSet {
            inputs: idx.iter().map(|i| self.inputs[*i].clone()).collect(),
            labels: idx.iter().map(|i| self.labels[*i]).collect(),
        }
    }

    /// Per-feature standard deviation over the non-test samples.
    pub fn feature_std(&self) -> Vec<f64> {
        let rows: Vec<&Vec<f64>> = (0..self.len())
            .filter(|i| self.tags[*i] != SplitTag::Test)
            .map(|i| &self.inputs[i])
            .collect();
        let d = self.dim();
        if rows.is_empty() {
            return vec![0.0; d];
        }
        let n = rows.len() as f64;
        (0..d)
            .map(|j| {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub ids: Vec<SampleId>,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Unlabeled inputs. Deliberately has no label field.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub ids: Vec<SampleId>,
    pub inputs: Vec<Vec<f64>>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// True labels of the unlabeled split, usable only to audit pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLabels {
    truth: HashMap<SampleId, usize>,
}

impl HiddenLabels {
    /// Joins `(id, pseudo-label, confidence)` with the hidden truth.
    pub fn audit(&self, pseudo: &[(SampleId, usize, f64)]) -> Result<Vec<PseudoLabelRecord>> {
        pseudo
            .iter()
            .map(|&(id, pseudo_label, confidence)| {
                let truth = *self.truth.get(&id).ok_or(Error::Lookup(id.0))?;
                Ok(PseudoLabelRecord {
                    confidence,
                    pseudo_label,
                    truth,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub labels_per_class: usize,
    /// Fraction of the dataset held out as test before labels are drawn.
    pub test_fraction: f64,
    pub seed: u64,
}

/// Diagonal Gaussian for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClass {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianClass {
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let variance = vec![std * std; mean.len()];
        Self { mean, variance }
    }
}

/// `classes` isotropic blobs with means `separation · (±e_{c mod D})`.
pub fn gaussian_blobs(classes: usize, dim: usize, separation: f64, std: f64) -> Vec<GaussianClass> {
    (0..classes)
        .map(|c| {
            let mut mean = vec![0.0; dim];
            if dim > 0 {
                let sign = if (c / dim) % 2 == 0 { 1.0 } else { -1.0 };
                mean[c % dim] = sign * separation;
            }
            GaussianClass::isotropic(mean, std)
        })
        .collect()
}

/// `classes` isotropic blobs whose means are rows `1..=classes` of the
/// `dim × dim` Sylvester-Hadamard matrix scaled to length `separation`, so
/// every coordinate carries part of the class signal and the means are
/// pairwise orthogonal. `dim` must be a power of two above `classes`.
pub fn hadamard_blobs(classes: usize, dim: usize, separation: f64, std: f64) -> Result<Vec<GaussianClass>> {
    if !dim.is_power_of_two() || dim <= classes {
        return Err(Error::Parameter(format!(
            "hadamard layout needs a power-of-two dimension above {classes}, got {dim}"
        )));
    }
    let scale = separation / (dim as f64).sqrt();
    Ok((1..=classes)
        .map(|row| {
            let mean = (0..dim)
                .map(|col| {
                    // H[r][c] = (-1)^popcount(r & c)
                    if (row & col).count_ones() % 2 == 0 {
                        scale
                    } else {
                        -scale
                    }
                })
                .collect();
            GaussianClass::isotropic(mean, std)
        })
        .collect())
}

/// Draws `n_samples` points, class `c` receiving `n/C` (+1 for the first
/// `n mod C` classes), in shuffled order.
pub fn gen_gaussian_classes(classes: &[GaussianClass], n_samples: usize, rng: &mut Rng) -> Result<Dataset> {
    if classes.is_empty() {
        return Err(Error::Parameter("no classes given".into()));
    }
    let dim = classes[0].mean.len();
    for (c, g) in classes.iter().enumerate() {
        if g.mean.len() != dim || g.variance.len() != dim {
            return Err(Error::Dimension(format!("class {c} has inconsistent dimensions")));
        }
        if g.variance.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Parameter(format!("class {c} has an invalid variance")));
        }
        if g.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Parameter(format!("class {c} has a non-finite mean")));
        }
    }
    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % classes.len()).collect();
    rng.shuffle(&mut labels);
    let inputs = labels
        .iter()
        .map(|&y| {
            let g = &classes[y];
            g.mean
                .iter()
                .zip(&g.variance)
                .map(|(m, v)| m + v.sqrt() * rng.normal())
                .collect()
        })
        .collect();
    Dataset::new(inputs, labels, classes.len())
}

/// Two interleaved half circles: class 0 on the unit upper half circle at
/// the origin, class 1 on the lower unit half circle centred at (1, 0.5).
pub fn gen_two_moons(n_samples: usize, noise: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(noise >= 0.0) {
        return Err(Error::Parameter(format!("noise {noise} must be >= 0")));
    }
    let n_outer = n_samples / 2;
    let n_inner = n_samples - n_outer;
    let angle = |i: usize, n: usize| {
        if n > 1 {
            PI * i as f64 / (n - 1) as f64
        } else {
            0.0
        }
    };
    let mut samples: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n_samples);
    for i in 0..n_outer {
        let t = angle(i, n_outer);
        samples.push((vec![t.cos(), t.sin()], 0));
    }
    for i in 0..n_inner {
        let t = angle(i, n_inner);
        samples.push((vec![1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    rng.shuffle(&mut samples);
    if noise > 0.0 {
        for (x, _) in samples.iter_mut() {
            x.iter_mut().for_each(|v| *v += noise * rng.normal());
        }
    }
    let (inputs, labels) = samples.into_iter().unzip();
    Dataset::new(inputs, labels, 2)
}

/// Holds out the test fraction, then tags exactly `labels_per_class`
/// samples of each class as labeled; the rest of the training part becomes
/// unlabeled. Deterministic in `spec.seed`.
pub fn subsample_labels(ds: &Dataset, spec: &SplitSpec) -> Result<Dataset> {
    if spec.labels_per_class == 0 {
        return Err(Error::Parameter("labels per class must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::Parameter(format!(
            "test fraction {} not in [0, 1)",
            spec.test_fraction
        )));
    }
    let mut rng = Rng::new(spec.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    let n_test = (ds.len() as f64 * spec.test_fraction).round() as usize;

    let mut tags = vec![SplitTag::Unlabeled; ds.len()];
    order[..n_test].iter().for_each(|i| tags[*i] = SplitTag::Test);
    let mut taken = vec![0usize; ds.classes];
    for &i in &order[n_test..] {
        let y = ds.labels[i];
        if taken[y] < spec.labels_per_class {
            taken[y] += 1;
            tags[i] = SplitTag::Labeled;
        }
    }
    if let Some(class) = taken.iter().position(|n| *n < spec.labels_per_class) {
        return Err(Error::Domain(format!(
            "class {class} has only {} training samples, {} labels requested",
            taken[class], spec.labels_per_class
        )));
    }
    let mut out = ds.clone();
    out.tags = tags;
    Ok(out)
}

/// Reads a CSV with a header row; the last column is an integer label.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let width = reader.headers().map_err(|e| csv_error(path, e))?.len();
    if width < 2 {
        return Err(Error::format(
            format!("{}:1", path.display()),
            "need at least one feature column and a label column",
        ));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let loc = || format!("{}:{line}", path.display());
        if record.len() != width {
            return Err(Error::format(
                loc(),
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        let mut x = Vec::with_capacity(width - 1);
        for (col, field) in record.iter().take(width - 1).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(loc(), format!("column {}: not a number: {field:?}", col + 1)))?;
            if !v.is_finite() {
                return Err(Error::format(loc(), format!("column {}: non-finite", col + 1)));
            }
            x.push(v);
        }
        let raw = record[width - 1].trim();
        let y: usize = raw
            .parse()
            .map_err(|_| Error::format(loc(), format!("label {raw:?} is not a class index")))?;
        inputs.push(x);
        labels.push(y);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, classes)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("{}:{line}", path.display()), format!("{other:?}")),
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(format!("byte {offset}"), format!("truncated before {what}")))
}

/// Reads an IDX image file (magic 0x803) and label file (magic 0x801).
/// Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;
    parse_idx(&img, &lab)
}

pub fn parse_idx(img: &[u8], lab: &[u8]) -> Result<Dataset> {
    let magic = be_u32(img, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "images byte 0",
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(img, 4, "image count")? as usize;
    let rows = be_u32(img, 8, "row count")? as usize;
    let cols = be_u32(img, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format("images byte 8", "zero image dimension"));
    }
    let expected = 16 + count * rows * cols;
    if img.len() != expected {
        return Err(Error::format(
            format!("images byte {}", img.len().min(expected)),
            format!("file has {} bytes, header declares {expected}", img.len()),
        ));
    }

    let magic = be_u32(lab, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "labels byte 0",
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let label_count = be_u32(lab, 4, "label count")? as usize;
    if label_count != count {
        return Err(Error::format(
            "labels byte 4",
            format!("{label_count} labels for {count} images"),
        ));
    }
    if lab.len() != 8 + count {
        return Err(Error::format(
            format!("labels byte {}", lab.len().min(8 + count)),
            format!("file has {} bytes, header declares {}", lab.len(), 8 + count),
        ));
    }

    let inputs = img[16..]
        .chunks_exact(rows * cols)
        .map(|px| px.iter().map(|b| *b as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = lab[8..].iter().map(|b| *b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, classes)?.with_grid(rows, cols)
}

/// Endless shuffled pass over `0..len`, reshuffling at every wrap.
#[derive(Debug, Clone)]
struct EpochCursor {
    order: Vec<usize>,
    pos: usize,
}

impl EpochCursor {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos == self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One step's worth of indices into the labeled and unlabeled sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Draws labeled and unlabeled batches as consecutive chunks of reshuffled
/// epochs. The labeled pool is usually smaller than a batch, so a labeled
/// batch spans several epochs and repeats samples.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    labeled: EpochCursor,
    unlabeled: EpochCursor,
    labeled_batch: usize,
    unlabeled_batch: usize,
}

impl BatchSampler {
    pub fn new(
        labeled_len: usize,
        unlabeled_len: usize,
        labeled_batch: usize,
        unlabeled_batch: usize,
    ) -> Result<Self> {
        if labeled_len == 0 {
            return Err(Error::Domain("labeled split is empty".into()));
        }
        if unlabeled_len == 0 && unlabeled_batch > 0 {
            return Err(Error::Domain("unlabeled split is empty".into()));
        }
        if labeled_batch == 0 {
            return Err(Error::Parameter("labeled batch size must be >= 1".into()));
        }
        Ok(Self {
            labeled: EpochCursor::new(labeled_len),
            unlabeled: EpochCursor::new(unlabeled_len),
            labeled_batch,
            unlabeled_batch,
        })
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> BatchIndices {
        BatchIndices {
            labeled: (0..self.labeled_batch).map(|_| self.labeled.next(rng)).collect(),
            unlabeled: (0..self.unlabeled_batch)
                .map(|_| self.unlabeled.next(rng))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn gaussian_counts_and_balance() {
        let mut rng = Rng::new(1);
        let ds = gen_gaussian_classes(&gaussian_blobs(3, 4, 2.0, 1.0), 100, &mut rng).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.class_counts(), vec![34, 33, 33]);
        assert_eq!(ds.dim(), 4);

        let bad = vec![GaussianClass {
            mean: vec![0.0],
            variance: vec![-1.0],
        }];
        assert!(matches!(
            gen_gaussian_classes(&bad, 10, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
        let (xs, ys) = (train.inputs(), train.unsplit_labels().unwrap());
        let c = train.classes();
        let d = train.dim();
        let mut centroids = vec![vec![0.0; d]; c];
        let mut counts = vec![0.0; c];
        for (x, y) in xs.iter().zip(ys) {
            centroids[*y].iter_mut().zip(x).for_each(|(m, v)| *m += v);
            counts[*y] += 1.0;
        }
        for (m, n) in centroids.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n);
        }
        let correct = test
            .inputs()
            .iter()
            .zip(test.unsplit_labels().unwrap())
            .filter(|(x, y)| {
                let dist = |m: &Vec<f64>| m.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..c)
                    .min_by(|a, b| dist(&centroids[*a]).total_cmp(&dist(&centroids[*b])))
                    .unwrap();
                best == **y
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn separated_gaussians_are_linearly_separable() {
        let mut rng = Rng::new(2);
        let blobs = gaussian_blobs(2, 2, 10.0, 1.0);
        let train = gen_gaussian_classes(&blobs, 400, &mut rng).unwrap();
        let test = gen_gaussian_classes(&blobs, 400, &mut rng).unwrap();
        assert!(nearest_centroid_accuracy(&train, &test) >= 0.99);
    }

    #[test]
    fn identical_means_are_chance() {
        let blobs = gaussian_blobs(3, 4, 0.0, 1.0);
        let mut total = 0.0;
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let train = gen_gaussian_classes(&blobs, 300, &mut rng).unwrap();
            let test = gen_gaussian_classes(&blobs, 600, &mut rng).unwrap();
            total += nearest_centroid_accuracy(&train, &test);
        }
        assert!(total / 10.0 <= 1.0 / 3.0 + 0.05, "{}", total / 10.0);
    }

    #[test]
    fn hadamard_means_are_orthogonal() {
        let blobs = hadamard_blobs(3, 8, 2.0, 1.0).unwrap();
        for (i, a) in blobs.iter().enumerate() {
            assert!((crate::numerics::norm(&a.mean) - 2.0).abs() < 1e-12);
            assert!(a.mean.iter().all(|v| (v.abs() - 2.0 / 8f64.sqrt()).abs() < 1e-12));
            for b in &blobs[i + 1..] {
                assert!(crate::numerics::dot(&a.mean, &b.mean).abs() < 1e-12);
            }
        }
        assert!(hadamard_blobs(3, 6, 2.0, 1.0).is_err());
        assert!(hadamard_blobs(4, 4, 2.0, 1.0).is_err());
    }

    #[test]
    fn noiseless_moons_lie_on_circles() {
        let mut rng = Rng::new(3);
        let ds = gen_two_moons(201, 0.0, &mut rng).unwrap();
        let counts = ds.class_counts();
        assert!(counts[0].abs_diff(counts[1]) <= 1);
        for (x, y) in ds.inputs().iter().zip(ds.unsplit_labels().unwrap()) {
            let (cx, cy) = if *y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((x[0] - cx).powi(2) + (x[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-9);
        }
    }

    fn nearest_neighbour_accuracy(train: &Dataset, test: &Dataset) -> f64 {
        let ys = train.unsplit_labels().unwrap();
        let correct = test
            .inputs()
            .iter()
            .zip(test.unsplit_labels().unwrap())
            .filter(|(x, y)| {
                let dist = |m: &Vec<f64>| m.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..train.len())
                    .min_by(|a, b| dist(&train.inputs()[*a]).total_cmp(&dist(&train.inputs()[*b])))
                    .unwrap();
                ys[best] == **y
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn moon_noise_hurts_nearest_neighbour() {
        // a centroid classifier is not sensitive enough here: on moons its
        // accuracy is about 0.79 with or without noise 0.3
        let clean_train = gen_two_moons(400, 0.0, &mut Rng::new(4)).unwrap();
        let clean_test = gen_two_moons(400, 0.0, &mut Rng::new(5)).unwrap();
        let noisy_train = gen_two_moons(400, 0.3, &mut Rng::new(4)).unwrap();
        let noisy_test = gen_two_moons(400, 0.3, &mut Rng::new(5)).unwrap();
        let clean = nearest_neighbour_accuracy(&clean_train, &clean_test);
        let noisy = nearest_neighbour_accuracy(&noisy_train, &noisy_test);
        assert!(noisy < clean, "{noisy} vs {clean}");
        assert!(gen_two_moons(10, -0.1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn label_subsampling() {
        let mut rng = Rng::new(6);
        let ds = gen_gaussian_classes(&gaussian_blobs(3, 2, 2.0, 1.0), 90, &mut rng).unwrap();
        let spec = SplitSpec {
            labels_per_class: 4,
            test_fraction: 0.2,
            seed: 7,
        };
        let split = subsample_labels(&ds, &spec).unwrap();
        let labeled = split.labeled_set();
        assert_eq!(labeled.len(), 12);
        for c in 0..3 {
            assert_eq!(labeled.labels.iter().filter(|y| **y == c).count(), 4);
        }
        assert_eq!(split.test_set().labels.len(), 18);
        assert_eq!(split.unlabeled_set().len(), 90 - 18 - 12);
        // tags partition the dataset
        assert!(split.tags().iter().all(|t| *t != SplitTag::Unassigned));
        assert_eq!(subsample_labels(&ds, &spec).unwrap().tags(), split.tags());
        assert!(split.unsplit_labels().is_err());

        let all = SplitSpec {
            labels_per_class: 30,
            test_fraction: 0.0,
            seed: 1,
        };
        assert!(subsample_labels(&ds, &all).unwrap().unlabeled_set().is_empty());
        let too_many = SplitSpec {
            labels_per_class: 31,
            ..all
        };
        let err = subsample_labels(&ds, &too_many).unwrap_err();
        assert!(err.to_string().contains("class"), "{err}");
    }

    #[test]
    fn hidden_labels_audit() {
        let ds = Dataset::new(vec![vec![0.0]; 4], vec![0, 1, 1, 0], 2).unwrap();
        let split = subsample_labels(
            &ds,
            &SplitSpec {
                labels_per_class: 1,
                test_fraction: 0.0,
                seed: 3,
            },
        )
        .unwrap();
        let u = split.unlabeled_set();
        let hidden = split.hidden_labels();
        let recs = hidden.audit(&[(u.ids[0], 0, 0.9)]).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(hidden.audit(&[(SampleId(99), 0, 0.9)]).is_err());
    }

    #[test]
    fn csv_golden_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "a,b,label\n0.5,-1.25,0\n3,4e-2,2\n 1.0 ,0,1\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.inputs(), &[vec![0.5, -1.25], vec![3.0, 0.04], vec![1.0, 0.0]]);
        assert_eq!(ds.unsplit_labels().unwrap(), &[0, 2, 1]);
        assert_eq!(ds.classes(), 3);

        fs::write(&path, "a,b,label\n0.5,1,0\n1,2\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert!(err.to_string().contains(":3"), "{err}");
        fs::write(&path, "a,b,label\n0.5,x,0\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Format { .. })));
        fs::write(&path, "a,b,label\n0.5,1,-1\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Format { .. })));
    }

    fn idx_images(count: u32, rows: u32, cols: u32, px: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IDX_IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(px);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_fixture_values() {
        let img = idx_images(2, 2, 2, &[0, 255, 51, 102, 255, 255, 0, 0]);
        let lab = idx_labels(&[1, 0]);
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        fs::File::create(&ip).unwrap().write_all(&img).unwrap();
        fs::File::create(&lp).unwrap().write_all(&lab).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.inputs()[0], vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.inputs()[1], vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ds.unsplit_labels().unwrap(), &[1, 0]);
        assert_eq!(ds.grid(), Some((2, 2)));
    }

    #[test]
    fn idx_errors() {
        let good = idx_images(1, 2, 2, &[1, 2, 3, 4]);
        let lab = idx_labels(&[0]);
        let mut bad = good.clone();
        bad[3] = 0x01;
        let err = parse_idx(&bad, &lab).unwrap_err();
        assert!(err.to_string().contains("byte 0"), "{err}");
        let err = parse_idx(&good[..18], &lab).unwrap_err();
        assert!(err.to_string().contains("byte 18"), "{err}");
        assert!(parse_idx(&good[..6], &lab).is_err());
        assert!(parse_idx(&good, &idx_labels(&[0, 1])).is_err());
        let mut bad_lab = lab.clone();
        bad_lab[3] = 0x03;
        assert!(parse_idx(&good, &bad_lab).is_err());
    }

    #[test]
    fn unlabeled_epochs_are_permutations() {
        let mut rng = Rng::new(8);
        let mut s = BatchSampler::new(5, 12, 4, 3).unwrap();
        let mut seen = Vec::new();
        for _ in 0..8 {
            seen.extend(s.next_batch(&mut rng).unlabeled);
        }
        for epoch in seen.chunks(12) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, (0..12).collect::<Vec<_>>());
        }

        let draw = |seed| {
            let mut rng = Rng::new(seed);
            let mut s = BatchSampler::new(5, 12, 64, 448).unwrap();
            (0..3).map(|_| s.next_batch(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        let b = &draw(3)[0];
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (64, 448));
        assert!(BatchSampler::new(0, 5, 1, 1).is_err());
        assert!(BatchSampler::new(5, 0, 1, 1).is_err());
    }
}
