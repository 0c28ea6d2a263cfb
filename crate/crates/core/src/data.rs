//! Datasets, synthetic multi-source generators, target shift and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::diffcore::DenseMatrix;
use crate::seeding::{self, streams, Rng};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("class prior is not on the simplex: {0:?}")]
    InvalidPrior(Vec<f64>),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("invalid shift: {0}")]
    InvalidShift(String),
    #[error("dropping class {class} leaves no examples")]
    EmptyClass { class: usize },
    #[error("{path}:{line}: {msg}")]
    Csv { path: String, line: u64, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

/// Labels attached to a batch: class indices or real-valued regression targets.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs with labels, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: DenseMatrix,
    pub y: Targets,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

fn select_rows(m: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut vals = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        vals.extend_from_slice(m.row(i));
    }
    DenseMatrix::new(idx.len(), m.cols(), vals).expect("rows copied from a valid matrix")
}

/// Classification examples.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(features: DenseMatrix, labels: Vec<usize>) -> Result<Self, DataError> {
        if features.rows() != labels.len() {
            return Err(DataError::Inconsistent(format!("{} rows but {} labels", features.rows(), labels.len())));
        }
        Ok(Self { features, labels })
    }

    pub fn empty(width: usize) -> Self {
        Self { features: DenseMatrix::zeros(0, width), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self { features: select_rows(&self.features, idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    pub fn batch(&self, idx: &[usize]) -> LabeledBatch {
        let s = self.select(idx);
        LabeledBatch { x: s.features, y: Targets::Classes(s.labels) }
    }

    pub fn as_batch(&self) -> LabeledBatch {
        LabeledBatch { x: self.features.clone(), y: Targets::Classes(self.labels.clone()) }
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut c = vec![0; n_classes];
        for &l in &self.labels {
            if l < n_classes {
                c[l] += 1;
            }
        }
        c
    }

    /// Features only; the labels do not travel with the result.
    pub fn strip_labels(&self) -> UnlabeledSet {
        UnlabeledSet { features: self.features.clone() }
    }

    /// Stacks sets of equal width.
    pub fn concat(parts: &[LabeledSet], width: usize) -> Self {
        let mut vals = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            vals.extend_from_slice(p.features.values());
            labels.extend_from_slice(&p.labels);
        }
        Self { features: DenseMatrix::new(labels.len(), width, vals).expect("parts share a width"), labels }
    }
}

/// Target inputs without labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub features: DenseMatrix,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> DenseMatrix {
        select_rows(&self.features, idx)
    }
}

/// `N` labeled sources, a (possibly empty) labeled target, unlabeled target
/// inputs and a held-out labeled target split used only for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSourceDataset {
    pub sources: Vec<LabeledSet>,
    pub target_labeled: LabeledSet,
    pub target_unlabeled: UnlabeledSet,
    pub target_test: LabeledSet,
    pub n_classes: usize,
    pub width: usize,
}

impl MultiSourceDataset {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.sources.iter().all(LabeledSet::is_empty) {
            return Err(DataError::Inconsistent("every source is empty".into()));
        }
        let labeled = self.sources.iter().chain([&self.target_labeled, &self.target_test]);
        for s in labeled {
            if s.width() != self.width {
                return Err(DataError::Inconsistent(format!("width {} differs from {}", s.width(), self.width)));
            }
            if let Some(&l) = s.labels.iter().find(|&&l| l >= self.n_classes) {
                return Err(DataError::Inconsistent(format!("label {l} outside {} classes", self.n_classes)));
            }
        }
        if self.target_unlabeled.features.cols() != self.width {
            return Err(DataError::Inconsistent("unlabeled target width differs".into()));
        }
        Ok(())
    }

    pub fn source_sizes(&self) -> Vec<usize> {
        self.sources.iter().map(LabeledSet::len).collect()
    }
}

/// Class-conditional Gaussian domain with diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub class_means: Vec<Vec<f64>>,
    pub class_stds: Vec<Vec<f64>>,
    pub prior: Vec<f64>,
    pub size: usize,
}

impl DomainSpec {
    fn validate(&self) -> Result<(), DataError> {
        let k = self.prior.len();
        let sum: f64 = self.prior.iter().sum();
        if k == 0 || self.prior.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidPrior(self.prior.clone()));
        }
        if self.class_means.len() != k || self.class_stds.len() != k {
            return Err(DataError::InvalidSpec("one mean and one std vector per class".into()));
        }
        let d = self.class_means[0].len();
        if self.class_means.iter().chain(&self.class_stds).any(|v| v.len() != d) {
            return Err(DataError::InvalidSpec("mean/std widths differ".into()));
        }
        if self.class_stds.iter().flatten().any(|&s| !(s >= 0.0)) {
            return Err(DataError::InvalidSpec("standard deviations must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<LabeledSet, DataError> {
        self.validate()?;
        let d = self.class_means[0].len();
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut vals = Vec::with_capacity(self.size * d);
        let mut labels = Vec::with_capacity(self.size);
        for _ in 0..self.size {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut label = self.prior.len() - 1;
            for (c, &p) in self.prior.iter().enumerate() {
                acc += p;
                if u < acc && p > 0.0 {
                    label = c;
                    break;
                }
            }
            while self.prior[label] == 0.0 {
                label -= 1;
            }
            for j in 0..d {
                let z: f64 = std_normal.sample(rng);
                vals.push(self.class_means[label][j] + self.class_stds[label][j] * z);
            }
            labels.push(label);
        }
        LabeledSet::new(DenseMatrix::new(self.size, d, vals).expect("sized above"), labels)
    }
}

/// Samples every source, a target pool split into labeled/unlabeled parts,
/// and a held-out target test split. Deterministic per seed.
pub fn gen_gaussian_sources(
    sources: &[DomainSpec],
    target: &DomainSpec,
    target_labeled: usize,
    target_test: usize,
    seed: u64,
) -> Result<MultiSourceDataset, DataError> {
    if sources.is_empty() {
        return Err(DataError::InvalidSpec("at least one source".into()));
    }
    let mut rng = seeding::stream(seed, streams::DATA);
    let srcs = sources.iter().map(|s| s.sample(&mut rng)).collect::<Result<Vec<_>, _>>()?;
    let pool = target.sample(&mut rng)?;
    let test = DomainSpec { size: target_test, ..target.clone() }.sample(&mut rng)?;
    let n_lab = target_labeled.min(pool.len());
    let lab_idx: Vec<usize> = (0..n_lab).collect();
    let unl_idx: Vec<usize> = (n_lab..pool.len()).collect();
    let (n_classes, width) = (target.prior.len(), pool.width());
    // Every example in the pool not used as a labeled target becomes unlabeled.
    let ds = MultiSourceDataset {
        sources: srcs,
        target_labeled: pool.select(&lab_idx),
        target_unlabeled: if unl_idx.is_empty() { pool.strip_labels() } else { pool.select(&unl_idx).strip_labels() },
        target_test: test,
        n_classes,
        width,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftTarget {
    Sources,
    Target,
}

/// Deterministic class subsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    pub drop_classes: Vec<usize>,
    pub rate: f64,
    pub apply_to: ShiftTarget,
    pub seed: u64,
}

/// Keeps exactly `ceil((1 - rate) * count)` examples of each dropped class,
/// chosen by a seeded shuffle, and shuffles the result.
pub fn shift_set(set: &LabeledSet, drop_classes: &[usize], rate: f64, rng: &mut Rng) -> Result<LabeledSet, DataError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DataError::InvalidShift(format!("drop rate {rate} outside [0, 1)")));
    }
    let mut keep: Vec<usize> = Vec::with_capacity(set.len());
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in set.labels.iter().enumerate() {
        if drop_classes.contains(&l) {
            by_class.entry(l).or_default().push(i);
        } else {
            keep.push(i);
        }
    }
    for &c in drop_classes {
        let mut members = by_class.remove(&c).unwrap_or_default();
        let kept = ((1.0 - rate) * members.len() as f64).ceil() as usize;
        if kept == 0 {
            return Err(DataError::EmptyClass { class: c });
        }
        members.shuffle(rng);
        keep.extend_from_slice(&members[..kept]);
    }
    keep.shuffle(rng);
    Ok(set.select(&keep))
}

/// Applies `spec` to the sources or to the labeled target splits. The
/// unlabeled target carries no labels, so it is never reshaped here.
pub fn apply_target_shift(ds: &MultiSourceDataset, spec: &ShiftSpec) -> Result<MultiSourceDataset, DataError> {
    if spec.drop_classes.iter().any(|&c| c >= ds.n_classes) {
        return Err(DataError::InvalidShift("drop class outside the label set".into()));
    }
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(DataError::InvalidShift(format!("drop rate {} outside [0, 1)", spec.rate)));
    }
    let mut out = ds.clone();
    if spec.rate == 0.0 {
        return Ok(out);
    }
    let mut rng = seeding::stream(spec.seed, streams::SHIFT);
    match spec.apply_to {
        ShiftTarget::Sources => {
            for s in &mut out.sources {
                *s = shift_set(s, &spec.drop_classes, spec.rate, &mut rng)?;
            }
        }
        ShiftTarget::Target => {
            if !out.target_labeled.is_empty() {
                out.target_labeled = shift_set(&out.target_labeled, &spec.drop_classes, spec.rate, &mut rng)?;
            }
            out.target_test = shift_set(&out.target_test, &spec.drop_classes, spec.rate, &mut rng)?;
        }
    }
    Ok(out)
}

/// The default desk-scale benchmark: 2-D inputs, two classes, each source a
/// rotated copy of the target geometry, class 1 subsampled in the sources.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBenchmark {
    /// Rotation of each source relative to the target, in degrees.
    pub source_angles: Vec<f64>,
    /// Class means sit at `±separation/2` along the first axis before rotation.
    pub separation: f64,
    pub std: f64,
    pub per_domain: usize,
    pub target_labeled: usize,
    pub target_test: usize,
    pub drop_rate: f64,
    pub drop_class: usize,
}

impl Default for SyntheticBenchmark {
    fn default() -> Self {
        Self {
            source_angles: vec![15.0, 75.0],
            separation: 3.0,
            std: 1.0,
            per_domain: 2000,
            target_labeled: 200,
            target_test: 2000,
            drop_rate: 0.5,
            drop_class: 1,
        }
    }
}

impl SyntheticBenchmark {
    fn domain(&self, angle_deg: f64, size: usize) -> DomainSpec {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let half = self.separation / 2.0;
        let mean = |sign: f64| vec![sign * half * c, sign * half * s];
        DomainSpec {
            class_means: vec![mean(-1.0), mean(1.0)],
            class_stds: vec![vec![self.std; 2]; 2],
            prior: vec![0.5, 0.5],
            size,
        }
    }

    pub fn source_specs(&self) -> Vec<DomainSpec> {
        self.source_angles.iter().map(|&a| self.domain(a, self.per_domain)).collect()
    }

    pub fn target_spec(&self) -> DomainSpec {
        self.domain(0.0, self.per_domain + self.target_labeled)
    }

    pub fn build(&self, seed: u64) -> Result<MultiSourceDataset, DataError> {
        let ds = gen_gaussian_sources(&self.source_specs(), &self.target_spec(), self.target_labeled, self.target_test, seed)?;
        apply_target_shift(
            &ds,
            &ShiftSpec { drop_classes: vec![self.drop_class], rate: self.drop_rate, apply_to: ShiftTarget::Sources, seed },
        )
    }
}

/// Reads `label,f0,f1,...` rows. `expected_width` pins the feature count.
pub fn load_csv(path: &Path, expected_width: Option<usize>) -> Result<LabeledSet, DataError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: p.clone(), source })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(file);
    let err = |line: u64, msg: String| DataError::Csv { path: p.clone(), line, msg };
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.get(0) != Some("label") {
        return Err(err(1, "header must start with `label`".into()));
    }
    let width = expected_width.unwrap_or(header.len() - 1);
    if header.len() - 1 != width {
        return Err(err(1, format!("header declares {} features, expected {width}", header.len() - 1)));
    }
    let mut vals = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width + 1 {
            return Err(err(line, format!("expected {} fields, found {}", width + 1, rec.len())));
        }
        let label: usize = rec[0].parse().map_err(|_| err(line, format!("non-integer label `{}`", &rec[0])))?;
        labels.push(label);
        for f in rec.iter().skip(1) {
            let v: f64 = f.parse().map_err(|_| err(line, format!("bad feature `{f}`")))?;
            if !v.is_finite() {
                return Err(err(line, format!("non-finite feature `{f}`")));
            }
            vals.push(v);
        }
    }
    let n = labels.len();
    LabeledSet::new(DenseMatrix::new(n, width, vals).expect("rows checked above"), labels)
}

/// Writes a set in the `label,f0,...` schema.
pub fn write_csv(path: &Path, set: &LabeledSet) -> Result<(), DataError> {
    let p = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Csv { path: p.clone(), line: 0, msg: e.to_string() })?;
    let mut header = vec!["label".to_string()];
    header.extend((0..set.width()).map(|j| format!("f{j}")));
    let io = |e: csv::Error| DataError::Csv { path: p.clone(), line: 0, msg: e.to_string() };
    w.write_record(&header).map_err(io)?;
    for (i, &l) in set.labels.iter().enumerate() {
        let mut row = vec![l.to_string()];
        row.extend(set.features.row(i).iter().map(f64::to_string));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| DataError::Io { path: p.clone(), source })?;
    Ok(())
}

/// Seeded per-epoch permutations of `0..len`, cut into batches.
/// The order is a function of `(seed, epoch)` only.
#[derive(Clone, Debug)]
pub struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::InvalidSpec("batch size must be at least 1".into()));
        }
        Ok(Self { len, batch_size, seed })
    }

    /// True when the requested batch exceeds the set, so each epoch is one full batch.
    pub fn oversized(&self) -> bool {
        self.batch_size > self.len
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = seeding::stream(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15), streams::BATCHES);
        let mut perm: Vec<usize> = (0..self.len).collect();
        perm.shuffle(&mut rng);
        perm.chunks(self.batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Endless batches, moving to the next epoch's permutation when one runs out.
    pub fn cycle(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0u64..).flat_map(move |e| self.epoch(e))
    }
}
