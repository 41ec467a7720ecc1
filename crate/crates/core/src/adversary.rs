//! Gradient-based attacks: FGSM, multi-step PGD with restarts, and targeted
//! variants.
//!
//! All attacks ascend (or descend, when targeted) a cross-entropy loss on
//! the model's logits and project back into the epsilon-ball after every
//! step (coordinate clamping for L-infinity, radial rescaling for L2)
//! plus an optional valid-range clip. Success is always judged on the
//! projected prediction, never the raw 2C index; the runtime projection is
//! outside the adversary's loss.
//!
//! FGSM is the single-step special case of the same update, so
//! `pgd(steps = 1, random_start = false)` is bit-identical to `fgsm` for
//! every spec; the classic fixed-epsilon FGSM step is the configuration
//! `step_size == epsilon`.
//!
//! Restarts keep, per sample, the candidate with the highest attack loss
//! (first found wins ties), which makes runs with a fixed seed fully
//! deterministic.

use std::fmt;

use crate::ducat::{argmax, project_prediction};
use crate::nn::{HeadMode, MlpModel, ModelError};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{backward, Tensor, TensorError};

#[derive(Debug)]
pub enum AttackError {
    InvalidSpec(String),
    LabelOutOfRange { index: usize, label: usize, limit: usize },
    TargetEqualsTrueLabel { index: usize },
    TargetNotAdmissible { index: usize, target: usize },
    TooFewClasses(usize),
    Model(ModelError),
    Tensor(TensorError),
}

impl fmt::Display for AttackError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackError::InvalidSpec(msg) => write!(f, "invalid attack spec: {msg}"),
            AttackError::LabelOutOfRange { index, label, limit } => {
                write!(f, "label {label} at sample {index} out of range {limit}")
            }
            AttackError::TargetEqualsTrueLabel { index } => {
                write!(f, "target equals true label at sample {index}")
            }
            AttackError::TargetNotAdmissible { index, target } => {
                write!(f, "target {target} at sample {index} is not admissible")
            }
            AttackError::TooFewClasses(c) => write!(f, "need at least 2 classes, got {c}"),
            AttackError::Model(e) => write!(f, "{e}"),
            AttackError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AttackError {}

impl From<ModelError> for AttackError {
    fn from(e: ModelError) -> Self {
        AttackError::Model(e)
    }
}

impl From<TensorError> for AttackError {
    fn from(e: TensorError) -> Self {
        AttackError::Tensor(e)
    }
}

pub type AttackResult<T> = Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Norm::Linf => write!(f, "linf"),
            Norm::L2 => write!(f, "l2"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    Untargeted,
    TargetedOriginal,
    TargetedDummy,
}

/// Which logits the attack loss reads on a doubled-head model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossHead {
    /// Cross-entropy over all output slots (2C on a doubled head).
    Full,
    /// Cross-entropy restricted to the first C logits.
    OriginalOnly,
}

/// Full adversary definition. `steps = 0` with no random start is the
/// identity adversary.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub restarts: usize,
    pub random_start: bool,
    pub target_mode: TargetMode,
    pub loss_head: LossHead,
    /// Valid input range; `None` disables range clipping (unbounded
    /// features).
    pub clip_range: Option<(f64, f64)>,
    pub seed: u64,
}

impl AttackSpec {
    /// L-infinity PGD with random start and unit-range clipping.
    pub fn pgd_linf(epsilon: f64, step_size: f64, steps: usize) -> Self {
        AttackSpec {
            norm: Norm::Linf,
            epsilon,
            step_size,
            steps,
            restarts: 1,
            random_start: true,
            target_mode: TargetMode::Untargeted,
            loss_head: LossHead::Full,
            clip_range: Some((0.0, 1.0)),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn identity() -> Self {
        AttackSpec {
            norm: Norm::Linf,
            epsilon: 0.0,
            step_size: 1.0,
            steps: 0,
            restarts: 1,
            random_start: false,
            target_mode: TargetMode::Untargeted,
            loss_head: LossHead::Full,
            clip_range: Some((0.0, 1.0)),
            seed: 0,
        }
    }

    pub fn validate(&self) -> AttackResult<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(AttackError::InvalidSpec(format!("epsilon {}", self.epsilon)));
        }
        if self.steps > 0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(AttackError::InvalidSpec(format!(
                "step_size {} with steps {}",
                self.step_size, self.steps
            )));
        }
        if self.restarts == 0 {
            return Err(AttackError::InvalidSpec("restarts must be >= 1".into()));
        }
        if let Some((lo, hi)) = self.clip_range {
            if !(lo < hi) {
                return Err(AttackError::InvalidSpec(format!("clip range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Output of one attack over a batch.
#[derive(Debug)]
pub struct AdversarialBatch {
    pub x_adv: Tensor,
    /// Per sample: projected prediction differs from the true label.
    pub success: Vec<bool>,
    /// Per sample, measured in the spec's norm.
    pub perturbation_norms: Vec<f64>,
}

impl AdversarialBatch {
    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }
}

/// Single-step attack; `spec.steps` must be 1. The step has length
/// `spec.step_size`, projected into the budget, so the classic
/// `x + epsilon * sign(grad)` form is `step_size == epsilon`.
pub fn fgsm(
    model: &MlpModel,
    x: &Tensor,
    ys: &[usize],
    spec: &AttackSpec,
) -> AttackResult<AdversarialBatch> {
    if spec.steps != 1 {
        return Err(AttackError::InvalidSpec(format!(
            "fgsm requires steps == 1, got {}",
            spec.steps
        )));
    }
    run_pgd(model, x, ys, None, spec)
}

/// Untargeted projected gradient ascent.
pub fn pgd(
    model: &MlpModel,
    x: &Tensor,
    ys: &[usize],
    spec: &AttackSpec,
) -> AttackResult<AdversarialBatch> {
    if spec.target_mode != TargetMode::Untargeted {
        return Err(AttackError::InvalidSpec(
            "pgd runs untargeted; use targeted_pgd".into(),
        ));
    }
    run_pgd(model, x, ys, None, spec)
}

/// Targeted projected gradient descent toward `y_target`. Success is still
/// judged against the true labels after projection.
pub fn targeted_pgd(
    model: &MlpModel,
    x: &Tensor,
    ys: &[usize],
    y_target: &[usize],
    spec: &AttackSpec,
) -> AttackResult<AdversarialBatch> {
    let c = model.num_classes();
    let out_dim = model.output_dim();
    match spec.target_mode {
        TargetMode::Untargeted => {
            return Err(AttackError::InvalidSpec(
                "targeted_pgd requires a targeted mode".into(),
            ))
        }
        TargetMode::TargetedOriginal => {
            for (i, (&t, &y)) in y_target.iter().zip(ys).enumerate() {
                if t == y {
                    return Err(AttackError::TargetEqualsTrueLabel { index: i });
                }
                if t >= c {
                    return Err(AttackError::TargetNotAdmissible { index: i, target: t });
                }
            }
        }
        TargetMode::TargetedDummy => {
            if model.head_mode() != HeadMode::Ducat {
                return Err(AttackError::InvalidSpec(
                    "dummy-targeted attack needs a doubled head".into(),
                ));
            }
            if spec.loss_head == LossHead::OriginalOnly {
                return Err(AttackError::InvalidSpec(
                    "dummy targets are invisible to an original-only loss".into(),
                ));
            }
            for (i, &t) in y_target.iter().enumerate() {
                if !(c..out_dim).contains(&t) {
                    return Err(AttackError::TargetNotAdmissible { index: i, target: t });
                }
            }
        }
    }
    run_pgd(model, x, ys, Some(y_target), spec)
}

/// Samples attack targets uniformly over the admissible set: original mode
/// excludes the true class, dummy mode excludes the true class's own dummy
/// slot.
pub fn sample_targets(
    ys: &[usize],
    c: usize,
    mode: TargetMode,
    perm: &[usize],
    seed: u64,
) -> AttackResult<Vec<usize>> {
    if c < 2 {
        return Err(AttackError::TooFewClasses(c));
    }
    let mut rng = Rng::new(derive_seed(seed, "targets", &[]));
    let mut out = Vec::with_capacity(ys.len());
    for (i, &y) in ys.iter().enumerate() {
        if y >= c {
            return Err(AttackError::LabelOutOfRange {
                index: i,
                label: y,
                limit: c,
            });
        }
        match mode {
            TargetMode::Untargeted => {
                return Err(AttackError::InvalidSpec(
                    "untargeted mode has no targets".into(),
                ))
            }
            TargetMode::TargetedOriginal => {
                let draw = rng.below(c - 1);
                out.push(if draw >= y { draw + 1 } else { draw });
            }
            TargetMode::TargetedDummy => {
                let own = perm[y];
                let draw = rng.below(c - 1);
                let slot = if draw >= own { draw + 1 } else { draw };
                out.push(c + slot);
            }
        }
    }
    Ok(out)
}

struct LossView {
    width: usize,
    slice: Option<(usize, usize)>,
}

fn loss_view(model: &MlpModel, spec: &AttackSpec) -> LossView {
    let out_dim = model.output_dim();
    match spec.loss_head {
        LossHead::OriginalOnly if out_dim > model.num_classes() => LossView {
            width: model.num_classes(),
            slice: Some((0, model.num_classes())),
        },
        _ => LossView {
            width: out_dim,
            slice: None,
        },
    }
}

fn onehot_rows(labels: &[usize], width: usize) -> AttackResult<Tensor> {
    let mut data = vec![0.0; labels.len() * width];
    for (i, &l) in labels.iter().enumerate() {
        if l >= width {
            return Err(AttackError::LabelOutOfRange {
                index: i,
                label: l,
                limit: width,
            });
        }
        data[i * width + l] = 1.0;
    }
    Ok(Tensor::new(&[labels.len(), width], data)?)
}

fn run_pgd(
    model: &MlpModel,
    x: &Tensor,
    ys: &[usize],
    targets: Option<&[usize]>,
    spec: &AttackSpec,
) -> AttackResult<AdversarialBatch> {
    spec.validate()?;
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != model.input_dim() {
        return Err(AttackError::Model(ModelError::DimensionMismatch {
            expected: model.input_dim(),
            got: *shape.last().unwrap_or(&0),
        }));
    }
    let (b, d) = (shape[0], shape[1]);
    let x0 = x.items();
    let view = loss_view(model, spec);
    // Ascend CE against the true label, or descend CE toward the target.
    let (labels, direction) = match targets {
        Some(t) => (t.to_vec(), -1.0),
        None => (ys.to_vec(), 1.0),
    };
    let label_rows = onehot_rows(&labels, view.width)?;

    let mut best_delta = vec![0.0; b * d];
    let mut best_loss = vec![f64::NEG_INFINITY; b];

    for restart in 0..spec.restarts {
        let mut rng = Rng::new(derive_seed(spec.seed, "pgd", &[restart as u64]));
        let mut delta = vec![0.0; b * d];
        if spec.random_start {
            random_start(&mut delta, b, d, spec, &mut rng);
            project(&mut delta, b, d, spec);
            clip_to_range(&mut delta, &x0, spec);
        }

        for _ in 0..spec.steps {
            let xa_data: Vec<f64> = x0.iter().zip(&delta).map(|(&o, &dl)| o + dl).collect();
            let xa = Tensor::new(&[b, d], xa_data)?.requires_grad();
            let mut logits = model.forward(&xa)?;
            if let Some((start, len)) = view.slice {
                logits = logits.slice_cols(start, len)?;
            }
            let loss = logits.cross_entropy(&label_rows)?;
            backward(&loss)?;
            let grad = xa.grad().expect("input gradient");

            match spec.norm {
                Norm::Linf => {
                    for i in 0..b * d {
                        delta[i] += direction * spec.step_size * sign(grad[i]);
                    }
                }
                Norm::L2 => {
                    for r in 0..b {
                        let row = &grad[r * d..(r + 1) * d];
                        let norm = l2(row);
                        if norm > 0.0 {
                            for j in 0..d {
                                delta[r * d + j] += direction * spec.step_size * row[j] / norm;
                            }
                        }
                    }
                }
            }
            project(&mut delta, b, d, spec);
            clip_to_range(&mut delta, &x0, spec);
        }

        // Per-sample attack loss of this restart's candidate; keep the
        // best, first found winning ties.
        let xa_data: Vec<f64> = x0.iter().zip(&delta).map(|(&o, &dl)| o + dl).collect();
        let cand_loss = per_sample_loss(model, &xa_data, b, d, &labels, &view, direction)?;
        for r in 0..b {
            if cand_loss[r] > best_loss[r] {
                best_loss[r] = cand_loss[r];
                best_delta[r * d..(r + 1) * d].copy_from_slice(&delta[r * d..(r + 1) * d]);
            }
        }
    }

    let adv_data: Vec<f64> = x0.iter().zip(&best_delta).map(|(&o, &dl)| o + dl).collect();
    let x_adv = Tensor::new(&[b, d], adv_data)?;
    let predicted = projected_predictions(model, &x_adv)?;
    let success: Vec<bool> = predicted.iter().zip(ys).map(|(&p, &y)| p != y).collect();
    let perturbation_norms = (0..b)
        .map(|r| {
            let row = &best_delta[r * d..(r + 1) * d];
            match spec.norm {
                Norm::Linf => row.iter().fold(0.0f64, |m, &v| m.max(v.abs())),
                Norm::L2 => l2(row),
            }
        })
        .collect();
    Ok(AdversarialBatch {
        x_adv,
        success,
        perturbation_norms,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

fn random_start(delta: &mut [f64], b: usize, d: usize, spec: &AttackSpec, rng: &mut Rng) {
    match spec.norm {
        Norm::Linf => {
            for v in delta.iter_mut() {
                *v = rng.range_f64(-spec.epsilon, spec.epsilon);
            }
        }
        Norm::L2 => {
            // direction from a Gaussian, radius epsilon * u^(1/d)
            for r in 0..b {
                let row = &mut delta[r * d..(r + 1) * d];
                for v in row.iter_mut() {
                    *v = rng.normal();
                }
                let norm = l2(row);
                if norm > 0.0 {
                    let radius = spec.epsilon * rng.next_f64().powf(1.0 / d as f64);
                    for v in row.iter_mut() {
                        *v *= radius / norm;
                    }
                }
            }
        }
    }
}

/// Projects the perturbation into the epsilon-ball: coordinate clamp for
/// L-infinity, radial rescaling for L2.
fn project(delta: &mut [f64], b: usize, d: usize, spec: &AttackSpec) {
    match spec.norm {
        Norm::Linf => {
            for v in delta.iter_mut() {
                *v = v.clamp(-spec.epsilon, spec.epsilon);
            }
        }
        Norm::L2 => {
            for r in 0..b {
                let row = &mut delta[r * d..(r + 1) * d];
                let norm = l2(row);
                if norm > spec.epsilon && norm > 0.0 {
                    let scale = spec.epsilon / norm;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }
    }
}

/// Pulls `x + delta` back into the valid input range. Clamping moves
/// coordinates toward the clean sample, so the ball constraint survives.
fn clip_to_range(delta: &mut [f64], x0: &[f64], spec: &AttackSpec) {
    if let Some((lo, hi)) = spec.clip_range {
        for (dl, &o) in delta.iter_mut().zip(x0) {
            *dl = (o + *dl).clamp(lo, hi) - o;
        }
    }
}

fn per_sample_loss(
    model: &MlpModel,
    xa_data: &[f64],
    b: usize,
    d: usize,
    labels: &[usize],
    view: &LossView,
    direction: f64,
) -> AttackResult<Vec<f64>> {
    let xa = Tensor::new(&[b, d], xa_data.to_vec())?;
    let logits = model.forward(&xa)?.items();
    let full = model.output_dim();
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let row = &logits[r * full..r * full + view.width];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        out.push(direction * (lse - row[labels[r]]));
    }
    Ok(out)
}

/// Projected class per sample: plain argmax for a standard head, raw 2C
/// argmax mapped through the dummy permutation for a doubled head.
pub fn projected_predictions(model: &MlpModel, x: &Tensor) -> AttackResult<Vec<usize>> {
    let logits = model.forward(x)?.items();
    let out_dim = model.output_dim();
    let c = model.num_classes();
    let b = x.shape()[0];
    let mut preds = Vec::with_capacity(b);
    for r in 0..b {
        let raw = argmax(&logits[r * out_dim..(r + 1) * out_dim]);
        let class = match model.head_mode() {
            HeadMode::Standard => raw,
            HeadMode::Ducat => project_prediction(raw, c, model.dummy_perm())
                .expect("argmax index is in range"),
        };
        preds.push(class);
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::InitSpec;

    fn model_2class(seed: u64) -> MlpModel {
        MlpModel::new(2, &[8], 2, &InitSpec::new(seed)).unwrap()
    }

    fn unit_batch(b: usize, d: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..b * d).map(|_| rng.range_f64(0.05, 0.95)).collect();
        let ys: Vec<usize> = (0..b).map(|_| rng.below(2)).collect();
        (Tensor::new(&[b, d], data).unwrap(), ys)
    }

    #[test]
    fn zero_budget_is_identity() {
        let model = model_2class(1);
        let (x, ys) = unit_batch(6, 2, 2);
        let mut spec = AttackSpec::pgd_linf(0.0, 0.01, 5);
        spec.random_start = true;
        let out = pgd(&model, &x, &ys, &spec).unwrap();
        assert_eq!(
            out.x_adv.items().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            x.items().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn fgsm_sign_matches_analytic_logistic_gradient() {
        // binary logistic pair: logits [0, w.x], CE input-gradient is
        // (p1 - y1) * w, so the fgsm direction is sign of +/- w
        let model = MlpModel::new(2, &[], 2, &InitSpec::new(3)).unwrap();
        let params = model.params();
        let w = [0.7, -1.3];
        params[0].set_data(&[0.0, w[0], 0.0, w[1]]); // column 0 zero, column 1 = w
        params[1].set_data(&[0.0, 0.0]);

        let x = Tensor::new(&[1, 2], vec![0.4, 0.6]).unwrap();
        let mut spec = AttackSpec::pgd_linf(0.05, 0.05, 1);
        spec.random_start = false;
        spec.clip_range = None;

        // true label 0: ascending CE pushes toward class 1, along +w
        let out = fgsm(&model, &x, &[0], &spec).unwrap();
        let delta: Vec<f64> = out
            .x_adv
            .items()
            .iter()
            .zip(x.items())
            .map(|(&a, o)| a - o)
            .collect();
        assert_eq!(delta[0].signum(), w[0].signum());
        assert_eq!(delta[1].signum(), w[1].signum());

        // true label 1: gradient flips
        let out = fgsm(&model, &x, &[1], &spec).unwrap();
        let delta: Vec<f64> = out
            .x_adv
            .items()
            .iter()
            .zip(x.items())
            .map(|(&a, o)| a - o)
            .collect();
        assert_eq!(delta[0].signum(), -w[0].signum());
        assert_eq!(delta[1].signum(), -w[1].signum());
    }

    #[test]
    fn fgsm_requires_single_step() {
        let model = model_2class(4);
        let (x, ys) = unit_batch(2, 2, 5);
        let spec = AttackSpec::pgd_linf(0.1, 0.1, 3);
        assert!(matches!(
            fgsm(&model, &x, &ys, &spec),
            Err(AttackError::InvalidSpec(_))
        ));
    }

    #[test]
    fn outputs_stay_in_ball_and_range() {
        let model = model_2class(6);
        let (x, ys) = unit_batch(50, 2, 7);
        for norm in [Norm::Linf, Norm::L2] {
            for restarts in [1usize, 3] {
                let mut spec = AttackSpec::pgd_linf(8.0 / 255.0, 2.0 / 255.0, 7);
                spec.norm = norm;
                spec.restarts = restarts;
                spec.seed = 11;
                let out = pgd(&model, &x, &ys, &spec).unwrap();
                for (i, &n) in out.perturbation_norms.iter().enumerate() {
                    assert!(n <= spec.epsilon + 1e-9, "sample {i}: norm {n}");
                }
                for v in out.x_adv.items() {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn pgd_single_step_is_bitwise_fgsm() {
        let model = model_2class(8);
        let (x, ys) = unit_batch(10, 2, 9);
        for norm in [Norm::Linf, Norm::L2] {
            let mut spec = AttackSpec::pgd_linf(8.0 / 255.0, 8.0 / 255.0, 1);
            spec.norm = norm;
            spec.random_start = false;
            let a = pgd(&model, &x, &ys, &spec).unwrap();
            let b = fgsm(&model, &x, &ys, &spec).unwrap();
            assert_eq!(
                a.x_adv.items().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.x_adv.items().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn pgd_breaks_fragile_linear_model_past_margin() {
        // linear 2-class model w.x + b: per-sample margin is
        // |z1 - z0| / (2 * |w1 - w0|_inf-dual); with epsilon above every
        // margin and enough steps, every sample flips
        let model = MlpModel::new(2, &[], 2, &InitSpec::new(10)).unwrap();
        let params = model.params();
        params[0].set_data(&[1.0, -1.0, 0.5, -0.5]); // z0 - z1 = 2*x0 + 1*x1
        params[1].set_data(&[0.0, 0.0]);

        let data = vec![0.52, 0.5, 0.55, 0.48, 0.51, 0.53, 0.6, 0.41];
        let x = Tensor::new(&[4, 2], data.clone()).unwrap();
        // all samples: z0 > z1 (2*x0 + x1 > 0), so clean prediction is 0
        let ys = vec![0usize; 4];
        // margin in Linf: (2 x0 + x1) / (|2| + |1|) <= (2*0.6+0.53)/3 < 0.58
        let mut spec = AttackSpec::pgd_linf(0.6, 0.1, 20);
        spec.clip_range = None;
        spec.random_start = false;
        let out = pgd(&model, &x, &ys, &spec).unwrap();
        assert!(out.success.iter().all(|&s| s), "success: {:?}", out.success);
        assert!((out.success_rate() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn restart_keeps_highest_loss_candidate() {
        let model = model_2class(12);
        let (x, ys) = unit_batch(20, 2, 13);
        let mut spec = AttackSpec::pgd_linf(0.1, 0.02, 5);
        spec.restarts = 4;
        spec.seed = 3;
        let kept = pgd(&model, &x, &ys, &spec).unwrap();
        let view = loss_view(&model, &spec);
        let kept_loss =
            per_sample_loss(&model, &kept.x_adv.items(), 20, 2, &ys, &view, 1.0).unwrap();

        // replay each restart as its own single-restart run
        for r in 0..4 {
            let mut single = spec.clone();
            single.restarts = 1;
            single.seed = spec.seed;
            // same derived stream as restart r of the multi-restart run
            let mut delta = vec![0.0; 20 * 2];
            let mut rng = Rng::new(derive_seed(spec.seed, "pgd", &[r]));
            random_start(&mut delta, 20, 2, &single, &mut rng);
            project(&mut delta, 20, 2, &single);
            clip_to_range(&mut delta, &x.items(), &single);
            let mut xa: Vec<f64> = x.items().iter().zip(&delta).map(|(&o, &dl)| o + dl).collect();
            for _ in 0..5 {
                let xt = Tensor::new(&[20, 2], xa.clone()).unwrap().requires_grad();
                let loss = model
                    .forward(&xt)
                    .unwrap()
                    .cross_entropy(&onehot_rows(&ys, 2).unwrap())
                    .unwrap();
                backward(&loss).unwrap();
                let g = xt.grad().unwrap();
                for i in 0..40 {
                    delta[i] += single.step_size * sign(g[i]);
                }
                project(&mut delta, 20, 2, &single);
                clip_to_range(&mut delta, &x.items(), &single);
                xa = x.items().iter().zip(&delta).map(|(&o, &dl)| o + dl).collect();
            }
            let candidate_loss = per_sample_loss(&model, &xa, 20, 2, &ys, &view, 1.0).unwrap();
            for i in 0..20 {
                assert!(kept_loss[i] >= candidate_loss[i] - 1e-12);
            }
        }
    }

    #[test]
    fn targeted_rejects_target_equal_to_label() {
        let model = model_2class(14);
        let (x, ys) = unit_batch(3, 2, 15);
        let mut spec = AttackSpec::pgd_linf(0.1, 0.02, 3);
        spec.target_mode = TargetMode::TargetedOriginal;
        let err = targeted_pgd(&model, &x, &ys, &ys, &spec).unwrap_err();
        assert!(matches!(err, AttackError::TargetEqualsTrueLabel { .. }));
    }

    #[test]
    fn targeted_zero_budget_cannot_flip_clean_correct_model() {
        // bias model predicting class 0 for everything; true labels 0
        let model = MlpModel::new(2, &[], 2, &InitSpec::new(16)).unwrap();
        let params = model.params();
        params[0].set_data(&[0.0; 4]);
        params[1].set_data(&[5.0, 0.0]);
        let (x, _) = unit_batch(5, 2, 17);
        let ys = vec![0usize; 5];
        let targets = vec![1usize; 5];
        let mut spec = AttackSpec::pgd_linf(0.0, 0.01, 5);
        spec.target_mode = TargetMode::TargetedOriginal;
        let out = targeted_pgd(&model, &x, &ys, &targets, &spec).unwrap();
        assert!(out.success.iter().all(|&s| !s));
    }

    #[test]
    fn sample_targets_forced_binary_case() {
        let perm = vec![0, 1];
        let targets = sample_targets(&[0, 0, 0], 2, TargetMode::TargetedOriginal, &perm, 5).unwrap();
        assert_eq!(targets, vec![1, 1, 1]);
    }

    #[test]
    fn sample_targets_uniform_chi_square() {
        let c = 10;
        let perm: Vec<usize> = (0..c).collect();
        let ys = vec![3usize; 100_000];
        let targets = sample_targets(&ys, c, TargetMode::TargetedOriginal, &perm, 7).unwrap();
        let mut counts = vec![0usize; c];
        for &t in &targets {
            assert_ne!(t, 3);
            counts[t] += 1;
        }
        let expected = 100_000.0 / 9.0;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != 3)
            .map(|(_, &n)| {
                let dev = n as f64 - expected;
                dev * dev / expected
            })
            .sum();
        // 8 degrees of freedom; 99.9th percentile is about 26.1
        assert!(chi2 < 26.1, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn sample_targets_dummy_mode_excludes_own_dummy() {
        let c = 4;
        let perm = vec![2, 0, 3, 1];
        let ys: Vec<usize> = (0..4000).map(|i| i % c).collect();
        let targets = sample_targets(&ys, c, TargetMode::TargetedDummy, &perm, 9).unwrap();
        for (&t, &y) in targets.iter().zip(&ys) {
            assert!((c..2 * c).contains(&t));
            assert_ne!(t, c + perm[y]);
        }
    }

    #[test]
    fn sample_targets_rejects_single_class() {
        assert!(matches!(
            sample_targets(&[0], 1, TargetMode::TargetedOriginal, &[0], 1),
            Err(AttackError::TooFewClasses(1))
        ));
    }

    #[test]
    fn untargeted_success_monotone_in_budget() {
        let model = model_2class(20);
        let (x, ys) = unit_batch(600, 2, 21);
        let mut prev = -1.0;
        for eps_num in [2.0, 4.0, 8.0, 16.0, 32.0] {
            let mut spec = AttackSpec::pgd_linf(eps_num / 255.0, eps_num / 255.0 / 4.0, 10);
            spec.seed = 22;
            let rate = pgd(&model, &x, &ys, &spec).unwrap().success_rate();
            assert!(
                rate >= prev - 1e-12,
                "success not monotone: {rate} after {prev}"
            );
            prev = rate;
        }
    }
}
