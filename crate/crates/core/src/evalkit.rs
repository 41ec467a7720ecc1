//! Evaluation metrics and diagnostic analyses.
//!
//! Accuracy accounting is uniform across head modes: a standard head is
//! judged by plain argmax, a doubled head by the projected class, and
//! attack success always means the projected prediction left the true
//! label. Mean is the arithmetic mean of clean and robust accuracy; NRR is
//! their harmonic mean, which punishes trading one side for the other.
//!
//! The diagnostics reproduce the failure-structure analyses: how many
//! defenses each adversarial sample beats (overlap histogram), how attack
//! success transfers between surrogate and target models split by whether
//! the surrogate itself was beaten, per-class confusion under attack, and
//! the robust-generalization gap between a seen and a held-out adversary.

use std::fmt;

use crate::adversary::{pgd, projected_predictions, AttackError, AttackSpec};
use crate::datasets::Dataset;
use crate::ducat::{predict, DucatError};
use crate::nn::{HeadMode, MlpModel, ModelError};
use crate::rng::derive_seed;

#[derive(Debug)]
pub enum EvalError {
    EmptyDataset,
    NeedMoreModels { need: usize, got: usize },
    ModelsDisagree(String),
    SpecsNotOrdered(String),
    Model(ModelError),
    Attack(AttackError),
    Ducat(DucatError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyDataset => write!(f, "dataset has no samples"),
            EvalError::NeedMoreModels { need, got } => {
                write!(f, "analysis needs at least {need} models, got {got}")
            }
            EvalError::ModelsDisagree(msg) => write!(f, "models disagree: {msg}"),
            EvalError::SpecsNotOrdered(msg) => write!(f, "attack specs not ordered: {msg}"),
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::Attack(e) => write!(f, "{e}"),
            EvalError::Ducat(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<AttackError> for EvalError {
    fn from(e: AttackError) -> Self {
        EvalError::Attack(e)
    }
}

impl From<DucatError> for EvalError {
    fn from(e: DucatError) -> Self {
        EvalError::Ducat(e)
    }
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Arithmetic mean of two accuracy percentages.
pub fn mean_score(clean: f64, robust: f64) -> f64 {
    (clean + robust) / 2.0
}

/// Harmonic-mean trade-off score over accuracy percentages:
/// `2 * clean * robust / (clean + robust)`, with `nrr(0, 0) = 0` by
/// convention.
pub fn nrr(clean: f64, robust: f64) -> f64 {
    if clean + robust == 0.0 {
        return 0.0;
    }
    2.0 * clean * robust / (clean + robust)
}

/// One adversary's slice of an evaluation report (accuracies in percent).
#[derive(Debug, Clone)]
pub struct AdversaryEval {
    pub name: String,
    pub robust_acc: f64,
    pub mean: f64,
    pub nrr: f64,
    /// Share of raw predictions under attack landing in dummy slots.
    pub dummy_hit_rate: f64,
}

/// Per-sample outcome: predicted class and whether the sample survived,
/// clean and per adversary.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub clean_pred: usize,
    pub clean_ok: bool,
    pub adversarial: Vec<(usize, bool)>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub head_mode: HeadMode,
    pub clean_acc: f64,
    pub clean_dummy_hit_rate: f64,
    pub adversaries: Vec<AdversaryEval>,
    pub per_sample: Vec<SampleOutcome>,
}

fn dummy_hits_percent(model: &MlpModel, x: &crate::tensor::Tensor) -> EvalResult<f64> {
    if model.head_mode() != HeadMode::Ducat {
        return Ok(0.0);
    }
    let preds = predict(model, x)?;
    Ok(100.0 * preds.iter().filter(|p| p.dummy_hit).count() as f64 / preds.len() as f64)
}

/// Clean and per-adversary robust accuracy over a test split.
pub fn evaluate(
    model: &MlpModel,
    dataset: &Dataset,
    specs: &[(String, AttackSpec)],
) -> EvalResult<EvalReport> {
    if dataset.n() == 0 {
        return Err(EvalError::EmptyDataset);
    }
    let (x, ys) = dataset.full_batch();
    let clean_preds = projected_predictions(model, &x)?;
    let clean_ok: Vec<bool> = clean_preds.iter().zip(&ys).map(|(&p, &y)| p == y).collect();
    let clean_acc = percent(&clean_ok);
    let clean_dummy_hit_rate = dummy_hits_percent(model, &x)?;

    let mut per_sample: Vec<SampleOutcome> = clean_preds
        .iter()
        .zip(&clean_ok)
        .map(|(&p, &ok)| SampleOutcome {
            clean_pred: p,
            clean_ok: ok,
            adversarial: Vec::with_capacity(specs.len()),
        })
        .collect();

    let mut adversaries = Vec::with_capacity(specs.len());
    for (name, spec) in specs {
        let adv = pgd(model, &x, &ys, spec)?;
        let preds = projected_predictions(model, &adv.x_adv)?;
        let defended: Vec<bool> = preds.iter().zip(&ys).map(|(&p, &y)| p == y).collect();
        let robust_acc = percent(&defended);
        for (sample, (&p, &ok)) in per_sample.iter_mut().zip(preds.iter().zip(&defended)) {
            sample.adversarial.push((p, ok));
        }
        adversaries.push(AdversaryEval {
            name: name.clone(),
            robust_acc,
            mean: mean_score(clean_acc, robust_acc),
            nrr: nrr(clean_acc, robust_acc),
            dummy_hit_rate: dummy_hits_percent(model, &adv.x_adv)?,
        });
    }

    Ok(EvalReport {
        head_mode: model.head_mode(),
        clean_acc,
        clean_dummy_hit_rate,
        adversaries,
        per_sample,
    })
}

fn percent(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    100.0 * flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
}

fn check_models_compatible(models: &[&MlpModel], dataset: &Dataset) -> EvalResult<()> {
    for m in models {
        if m.num_classes() != dataset.num_classes() {
            return Err(EvalError::ModelsDisagree(format!(
                "model has {} classes, dataset has {}",
                m.num_classes(),
                dataset.num_classes()
            )));
        }
        if m.input_dim() != dataset.dim() {
            return Err(EvalError::ModelsDisagree(format!(
                "model input dim {} vs dataset dim {}",
                m.input_dim(),
                dataset.dim()
            )));
        }
    }
    Ok(())
}

/// Per-sample count of defenses that survived their own white-box attack,
/// bucketized over 0..=M.
#[derive(Debug, Clone)]
pub struct OverlapHistogram {
    pub defended_counts: Vec<usize>,
    pub buckets: Vec<usize>,
}

pub fn overlap_histogram(
    models: &[&MlpModel],
    dataset: &Dataset,
    spec: &AttackSpec,
) -> EvalResult<OverlapHistogram> {
    if models.is_empty() {
        return Err(EvalError::NeedMoreModels { need: 1, got: 0 });
    }
    check_models_compatible(models, dataset)?;
    let (x, ys) = dataset.full_batch();
    let mut defended_counts = vec![0usize; dataset.n()];
    for (mi, model) in models.iter().enumerate() {
        let mut attack = spec.clone();
        attack.seed = derive_seed(spec.seed, "overlap", &[mi as u64]);
        let adv = pgd(model, &x, &ys, &attack)?;
        let preds = projected_predictions(model, &adv.x_adv)?;
        for (i, (&p, &y)) in preds.iter().zip(&ys).enumerate() {
            if p == y {
                defended_counts[i] += 1;
            }
        }
    }
    let mut buckets = vec![0usize; models.len() + 1];
    for &c in &defended_counts {
        buckets[c] += 1;
    }
    Ok(OverlapHistogram {
        defended_counts,
        buckets,
    })
}

/// Transfer rates between surrogate and target models, split by whether the
/// sample beat its surrogate. Rates are `None` when a subset is empty.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub model_count: usize,
    /// `[surrogate][target]`, over samples that beat the surrogate.
    pub success_rate: Vec<Vec<Option<f64>>>,
    /// `[surrogate][target]`, over samples the surrogate defended.
    pub fail_rate: Vec<Vec<Option<f64>>>,
    pub success_sizes: Vec<usize>,
    pub fail_sizes: Vec<usize>,
}

pub fn transfer_matrix(
    models: &[&MlpModel],
    dataset: &Dataset,
    spec: &AttackSpec,
) -> EvalResult<TransferMatrix> {
    if models.len() < 2 {
        return Err(EvalError::NeedMoreModels {
            need: 2,
            got: models.len(),
        });
    }
    check_models_compatible(models, dataset)?;
    let m = models.len();
    let (x, ys) = dataset.full_batch();
    let mut success_rate = vec![vec![None; m]; m];
    let mut fail_rate = vec![vec![None; m]; m];
    let mut success_sizes = vec![0usize; m];
    let mut fail_sizes = vec![0usize; m];

    for s in 0..m {
        let mut attack = spec.clone();
        attack.seed = derive_seed(spec.seed, "transfer", &[s as u64]);
        let adv = pgd(models[s], &x, &ys, &attack)?;
        let surrogate_preds = projected_predictions(models[s], &adv.x_adv)?;
        let beat_surrogate: Vec<bool> = surrogate_preds
            .iter()
            .zip(&ys)
            .map(|(&p, &y)| p != y)
            .collect();
        success_sizes[s] = beat_surrogate.iter().filter(|&&b| b).count();
        fail_sizes[s] = dataset.n() - success_sizes[s];

        for t in 0..m {
            let target_preds = projected_predictions(models[t], &adv.x_adv)?;
            let mut hit = [0usize; 2];
            let mut total = [0usize; 2];
            for i in 0..dataset.n() {
                let subset = usize::from(beat_surrogate[i]);
                total[subset] += 1;
                if target_preds[i] != ys[i] {
                    hit[subset] += 1;
                }
            }
            success_rate[s][t] = (total[1] > 0).then(|| 100.0 * hit[1] as f64 / total[1] as f64);
            fail_rate[s][t] = (total[0] > 0).then(|| 100.0 * hit[0] as f64 / total[0] as f64);
        }
    }

    Ok(TransferMatrix {
        model_count: m,
        success_rate,
        fail_rate,
        success_sizes,
        fail_sizes,
    })
}

/// Row = true class, column = projected predicted class; attacked when a
/// spec is given.
pub fn confusion_matrix(
    model: &MlpModel,
    dataset: &Dataset,
    spec: Option<&AttackSpec>,
) -> EvalResult<Vec<Vec<usize>>> {
    check_models_compatible(&[model], dataset)?;
    let (x, ys) = dataset.full_batch();
    let preds = match spec {
        None => projected_predictions(model, &x)?,
        Some(spec) => {
            let adv = pgd(model, &x, &ys, spec)?;
            projected_predictions(model, &adv.x_adv)?
        }
    };
    let c = dataset.num_classes();
    let mut matrix = vec![vec![0usize; c]; c];
    for (&p, &y) in preds.iter().zip(&ys) {
        matrix[y][p] += 1;
    }
    Ok(matrix)
}

/// Robust accuracy under the seen and the held-out adversary plus the
/// generalization gap, for a hard-label and a two-hot model.
#[derive(Debug, Clone)]
pub struct GapReport {
    pub hard_seen: f64,
    pub hard_strong: f64,
    pub hard_gap: f64,
    pub twohot_seen: f64,
    pub twohot_strong: f64,
    pub twohot_gap: f64,
}

/// Measures how much robustness against the training adversary evaporates
/// under a strictly stronger one. The strong spec must dominate in steps
/// and restarts.
pub fn toy_case_gap(
    model_hard: &MlpModel,
    model_twohot: &MlpModel,
    dataset: &Dataset,
    train_spec: &AttackSpec,
    strong_spec: &AttackSpec,
) -> EvalResult<GapReport> {
    if strong_spec.steps < train_spec.steps || strong_spec.restarts < train_spec.restarts {
        return Err(EvalError::SpecsNotOrdered(format!(
            "strong ({} steps, {} restarts) must dominate seen ({} steps, {} restarts)",
            strong_spec.steps, strong_spec.restarts, train_spec.steps, train_spec.restarts
        )));
    }
    let robust = |model: &MlpModel, spec: &AttackSpec| -> EvalResult<f64> {
        let report = evaluate(model, dataset, &[("spec".into(), spec.clone())])?;
        Ok(report.adversaries[0].robust_acc)
    };
    let hard_seen = robust(model_hard, train_spec)?;
    let hard_strong = robust(model_hard, strong_spec)?;
    let twohot_seen = robust(model_twohot, train_spec)?;
    let twohot_strong = robust(model_twohot, strong_spec)?;
    Ok(GapReport {
        hard_seen,
        hard_strong,
        hard_gap: hard_seen - hard_strong,
        twohot_seen,
        twohot_strong,
        twohot_gap: twohot_seen - twohot_strong,
    })
}
