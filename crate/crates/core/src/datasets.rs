//! Seeded synthetic datasets and CSV persistence.
//!
//! Two generators cover the lab's needs: separable Gaussian blobs and
//! concentric rings (the non-linearly-separable case where the
//! robustness-accuracy tension is visible). Class structure (blob centers,
//! ring radii) is derived from the base seed alone, so train and test
//! splits share one distribution while drawing their samples from
//! independent per-split streams.
//!
//! Features live in [0, 1] by default so image-convention budgets such as
//! 8/255 keep their meaning; raw mode skips the final clamp and pairs with
//! range clipping disabled in the adversary.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum DatasetError {
    BadSpec(String),
    SeparationInfeasible { separation: f64, attempts: usize },
    OverlappingRings { gap: f64, required: f64 },
    MalformedRow { line: usize, reason: String },
    LabelOutOfRange { line: usize, label: usize, c: usize },
    Empty,
    Io(std::io::Error),
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::BadSpec(msg) => write!(f, "bad dataset spec: {msg}"),
            DatasetError::SeparationInfeasible { separation, attempts } => write!(
                f,
                "could not place centers with separation {separation} in {attempts} attempts"
            ),
            DatasetError::OverlappingRings { gap, required } => {
                write!(f, "ring gap {gap} below required {required} for given noise")
            }
            DatasetError::MalformedRow { line, reason } => {
                write!(f, "malformed row at line {line}: {reason}")
            }
            DatasetError::LabelOutOfRange { line, label, c } => {
                write!(f, "label {label} at line {line} is >= declared class count {c}")
            }
            DatasetError::Empty => write!(f, "dataset has no rows"),
            DatasetError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e)
    }
}

pub type DatasetResult<T> = Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// Labeled feature matrix plus generator provenance.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
    meta: Vec<(String, String)>,
}

impl Dataset {
    pub fn from_parts(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
        meta: Vec<(String, String)>,
    ) -> DatasetResult<Dataset> {
        if labels.is_empty() {
            return Err(DatasetError::Empty);
        }
        if features.len() != labels.len() * dim {
            return Err(DatasetError::BadSpec(format!(
                "{} features for {} rows of dim {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DatasetError::LabelOutOfRange {
                line: i + 1,
                label: l,
                c: num_classes,
            });
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            num_classes,
            meta,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn meta(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Tensor and label views for a subset of rows, in the given order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            ys.push(self.labels[i]);
        }
        (
            Tensor::new(&[indices.len(), self.dim], data).expect("finite dataset rows"),
            ys,
        )
    }

    pub fn full_batch(&self) -> (Tensor, Vec<usize>) {
        let indices: Vec<usize> = (0..self.n()).collect();
        self.batch(&indices)
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Isotropic Gaussian blobs, one per class.
#[derive(Debug, Clone)]
pub struct GaussianSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class_n: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Clamp samples into [0, 1] (centers always live inside an inset box).
    pub rescale01: bool,
}

const CENTER_LO: f64 = 0.15;
const CENTER_HI: f64 = 0.85;
const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Seeded class centers with pairwise distance >= separation.
fn gaussian_centers(spec: &GaussianSpec) -> DatasetResult<Vec<f64>> {
    let mut rng = Rng::new(derive_seed(spec.seed, "gauss-centers", &[]));
    let mut centers: Vec<f64> = Vec::with_capacity(spec.num_classes * spec.dim);
    let mut placed = 0usize;
    let mut attempts = 0usize;
    while placed < spec.num_classes {
        if attempts >= PLACEMENT_ATTEMPTS {
            return Err(DatasetError::SeparationInfeasible {
                separation: spec.separation,
                attempts,
            });
        }
        attempts += 1;
        let cand: Vec<f64> = (0..spec.dim)
            .map(|_| rng.range_f64(CENTER_LO, CENTER_HI))
            .collect();
        let ok = (0..placed).all(|k| {
            let dist: f64 = (0..spec.dim)
                .map(|j| (centers[k * spec.dim + j] - cand[j]).powi(2))
                .sum::<f64>()
                .sqrt();
            dist >= spec.separation
        });
        if ok {
            centers.extend_from_slice(&cand);
            placed += 1;
        }
    }
    Ok(centers)
}

pub fn gen_gaussians(spec: &GaussianSpec, split: Split) -> DatasetResult<Dataset> {
    if spec.num_classes < 2 || spec.dim < 2 {
        return Err(DatasetError::BadSpec(format!(
            "need C >= 2 and d >= 2, got C {} d {}",
            spec.num_classes, spec.dim
        )));
    }
    if spec.per_class_n == 0 || spec.noise_sigma < 0.0 || spec.separation < 0.0 {
        return Err(DatasetError::BadSpec("non-positive size or negative scale".into()));
    }
    let centers = gaussian_centers(spec)?;
    let mut rng = Rng::new(derive_seed(spec.seed, "gauss-noise", &[split.stream()]));
    let n = spec.num_classes * spec.per_class_n;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..spec.num_classes {
        for _ in 0..spec.per_class_n {
            for j in 0..spec.dim {
                let mut v = centers[k * spec.dim + j] + spec.noise_sigma * rng.normal();
                if spec.rescale01 {
                    v = v.clamp(0.0, 1.0);
                }
                features.push(v);
            }
            labels.push(k);
        }
    }
    let meta = vec![
        ("kind".into(), "gaussians".into()),
        ("seed".into(), spec.seed.to_string()),
        ("split".into(), split.tag().into()),
        ("c".into(), spec.num_classes.to_string()),
        ("dim".into(), spec.dim.to_string()),
        ("per_class_n".into(), spec.per_class_n.to_string()),
        ("separation".into(), spec.separation.to_string()),
        ("noise_sigma".into(), spec.noise_sigma.to_string()),
        ("rescale01".into(), spec.rescale01.to_string()),
    ];
    Dataset::from_parts(features, labels, spec.dim, spec.num_classes, meta)
}

/// Concentric annuli around (0.5, 0.5), one radius per class.
#[derive(Debug, Clone)]
pub struct RingSpec {
    pub per_class_n: usize,
    pub radii: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

pub fn gen_rings(spec: &RingSpec, split: Split) -> DatasetResult<Dataset> {
    let c = spec.radii.len();
    if c < 2 {
        return Err(DatasetError::BadSpec("need at least 2 radii".into()));
    }
    if spec.per_class_n == 0 || spec.noise < 0.0 {
        return Err(DatasetError::BadSpec("non-positive size or negative noise".into()));
    }
    if spec.radii.iter().any(|&r| r <= 0.0)
        || spec.radii.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(DatasetError::BadSpec(format!(
            "radii must be positive and strictly increasing: {:?}",
            spec.radii
        )));
    }
    // 2 sigma of radial noise on each side must not bridge two annuli
    let required = 4.0 * spec.noise;
    for w in spec.radii.windows(2) {
        let gap = w[1] - w[0];
        if gap < required {
            return Err(DatasetError::OverlappingRings { gap, required });
        }
    }
    let max_extent = spec.radii.last().unwrap() + required;
    if max_extent > 0.5 {
        return Err(DatasetError::BadSpec(format!(
            "outer ring plus noise ({max_extent:.3}) leaves the unit box"
        )));
    }

    let mut rng = Rng::new(derive_seed(spec.seed, "rings", &[split.stream()]));
    let n = c * spec.per_class_n;
    let mut features = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for (k, &radius) in spec.radii.iter().enumerate() {
        for _ in 0..spec.per_class_n {
            let theta = rng.range_f64(0.0, std::f64::consts::TAU);
            let r = radius + spec.noise * rng.normal();
            features.push((0.5 + r * theta.cos()).clamp(0.0, 1.0));
            features.push((0.5 + r * theta.sin()).clamp(0.0, 1.0));
            labels.push(k);
        }
    }
    let meta = vec![
        ("kind".into(), "rings".into()),
        ("seed".into(), spec.seed.to_string()),
        ("split".into(), split.tag().into()),
        ("c".into(), c.to_string()),
        ("dim".into(), "2".into()),
        ("per_class_n".into(), spec.per_class_n.to_string()),
        (
            "radii".into(),
            spec.radii
                .iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        ),
        ("noise".into(), spec.noise.to_string()),
    ];
    Dataset::from_parts(features, labels, 2, c, meta)
}

// ---- CSV persistence ----------------------------------------------------
//
// `# key=value` metadata lines, then the `label,f0,f1,...` header, then one
// row per sample. Floats carry 17 significant digits so the round trip is
// bit-exact.

pub fn save_csv(dataset: &Dataset, path: &Path) -> DatasetResult<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut has_c = false;
    for (k, v) in dataset.meta() {
        if k == "c" {
            has_c = true;
        }
        writeln!(file, "# {k}={v}")?;
    }
    if !has_c {
        writeln!(file, "# c={}", dataset.num_classes())?;
    }
    write!(file, "label")?;
    for j in 0..dataset.dim() {
        write!(file, ",f{j}")?;
    }
    writeln!(file)?;
    for i in 0..dataset.n() {
        write!(file, "{}", dataset.labels()[i])?;
        for v in dataset.row(i) {
            write!(file, ",{v:.16e}")?;
        }
        writeln!(file)?;
    }
    Ok(())
}

pub fn load_csv(path: &Path) -> DatasetResult<Dataset> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut meta: Vec<(String, String)> = Vec::new();
    let mut declared_c: Option<usize> = None;
    let mut dim: Option<usize> = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();

    for (idx, line) in file.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                let (k, v) = (k.trim().to_string(), v.trim().to_string());
                if k == "c" {
                    declared_c = v.parse().ok();
                }
                meta.push((k, v));
            }
            continue;
        }
        if dim.is_none() {
            // header row
            let cols: Vec<&str> = trimmed.split(',').collect();
            if cols.first() != Some(&"label") || cols.len() < 2 {
                return Err(DatasetError::MalformedRow {
                    line: line_no,
                    reason: format!("expected 'label,f0,...' header, got '{trimmed}'"),
                });
            }
            dim = Some(cols.len() - 1);
            continue;
        }
        let d = dim.unwrap();
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != d + 1 {
            return Err(DatasetError::MalformedRow {
                line: line_no,
                reason: format!("expected {} fields, got {}", d + 1, fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| DatasetError::MalformedRow {
            line: line_no,
            reason: format!("bad label '{}'", fields[0]),
        })?;
        if let Some(c) = declared_c {
            if label >= c {
                return Err(DatasetError::LabelOutOfRange {
                    line: line_no,
                    label,
                    c,
                });
            }
        }
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| DatasetError::MalformedRow {
                line: line_no,
                reason: format!("bad float '{f}'"),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::MalformedRow {
                    line: line_no,
                    reason: format!("non-finite value '{f}'"),
                });
            }
            features.push(v);
        }
        labels.push(label);
    }

    if labels.is_empty() {
        return Err(DatasetError::Empty);
    }
    let dim = dim.unwrap();
    let c = declared_c.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));
    Dataset::from_parts(features, labels, dim, c, meta)
}
