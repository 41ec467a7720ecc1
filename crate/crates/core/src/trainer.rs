//! Adversarial training loops: the dummy-class method and the PGD-AT
//! baseline, with SGD momentum, step learning-rate decay, per-epoch
//! evaluation, and best-checkpoint tracking.
//!
//! A dummy-class run doubles the head up front and then trains in two
//! phases. Before the start epoch it takes plain adversarial-CE steps
//! restricted to the first C logits, exactly what the baseline does, so
//! the warmup phase of a dummy-class run is trace-identical to a PGD-AT run
//! with the same seed. From the start epoch on, the adversary attacks the
//! full 2C-logit cross-entropy (the deployed model is the doubled one) and
//! the update descends the two-hot objective.
//!
//! The best checkpoint is the epoch with the highest robust accuracy under
//! the training adversary, earliest epoch winning ties; held-out evaluation
//! adversaries are recorded but never drive selection.
//!
//! Every stochastic choice (shuffling, attack randomness, per-epoch
//! evaluation attacks) derives from the run seed, so reruns are
//! bit-identical.

use std::fmt;

use crate::adversary::{pgd, projected_predictions, AttackError, AttackSpec, LossHead, TargetMode};
use crate::datasets::Dataset;
use crate::ducat::{ducat_loss, DucatError, DucatHyper};
use crate::nn::{DummyRowInit, HeadMode, InitSpec, MlpModel, ModelError};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{backward, Tensor, TensorError};

#[derive(Debug)]
pub enum TrainError {
    BadConfig(String),
    LabelOutOfRange { index: usize, label: usize, c: usize },
    NonFiniteLoss { epoch: usize, batch: usize },
    ResumeNeedsDoubledStart { resume_epoch: usize, start_epoch: usize },
    Model(ModelError),
    Attack(AttackError),
    Ducat(DucatError),
    Tensor(TensorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig(msg) => write!(f, "bad training config: {msg}"),
            TrainError::LabelOutOfRange { index, label, c } => {
                write!(f, "label {label} at sample {index} out of range [0, {c})")
            }
            TrainError::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}; aborting")
            }
            TrainError::ResumeNeedsDoubledStart {
                resume_epoch,
                start_epoch,
            } => write!(
                f,
                "checkpoint is already doubled but resume epoch {resume_epoch} is before \
                 start epoch {start_epoch}"
            ),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Attack(e) => write!(f, "{e}"),
            TrainError::Ducat(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<AttackError> for TrainError {
    fn from(e: AttackError) -> Self {
        TrainError::Attack(e)
    }
}

impl From<DucatError> for TrainError {
    fn from(e: DucatError) -> Self {
        TrainError::Ducat(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    PgdAt,
    Ducat,
    /// Dummy-class training with hard labels (beta1 = beta2 = 1), the
    /// configuration that overfits its training adversary.
    DucatHardToy,
}

impl Method {
    pub fn uses_dummy_head(self) -> bool {
        !matches!(self, Method::PgdAt)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Method::PgdAt => "pgd_at",
            Method::Ducat => "ducat",
            Method::DucatHardToy => "ducat_hard_toy",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Step decay: the rate at an epoch is the initial rate times the factor of
/// every decay whose epoch has been reached.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub initial: f64,
    pub decays: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        LrSchedule {
            initial: rate,
            decays: Vec::new(),
        }
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        let mut rate = self.initial;
        for &(at, factor) in &self.decays {
            if epoch >= at {
                rate *= factor;
            }
        }
        rate
    }
}

/// Architecture and initialization of the model a run trains.
#[derive(Debug, Clone)]
pub struct ModelArch {
    pub hidden: Vec<usize>,
    pub init_seed: u64,
    pub dummy_row_init: DummyRowInit,
    pub dummy_perm: Option<Vec<usize>>,
}

impl ModelArch {
    pub fn new(hidden: Vec<usize>, init_seed: u64) -> Self {
        ModelArch {
            hidden,
            init_seed,
            dummy_row_init: DummyRowInit::Fresh,
            dummy_perm: None,
        }
    }

    fn init_spec(&self) -> InitSpec {
        InitSpec {
            seed: self.init_seed,
            dummy_row_init: self.dummy_row_init,
        }
    }

    fn dummy_init_spec(&self) -> InitSpec {
        InitSpec {
            seed: derive_seed(self.init_seed, "dummy-init", &[]),
            dummy_row_init: self.dummy_row_init,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    /// Total epochs T; training runs from `resume_epoch` to `T`.
    pub epochs: usize,
    pub resume_epoch: usize,
    pub hyper: DucatHyper,
    pub train_attack: AttackSpec,
    pub optim: OptimConfig,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
    /// Extra per-epoch evaluation adversaries; the training adversary is
    /// always evaluated first and is the only input to checkpoint
    /// selection.
    pub extra_epoch_evals: Vec<(String, AttackSpec)>,
}

impl TrainConfig {
    /// Desk-scale defaults mirroring the reference schedule proportions:
    /// 60 epochs, 0.1 decays at 40 and 50, two-hot phase from epoch 50.
    pub fn desk_defaults(method: Method, train_attack: AttackSpec, seed: u64) -> Self {
        TrainConfig {
            method,
            epochs: 60,
            resume_epoch: 0,
            hyper: DucatHyper::defaults(50),
            train_attack,
            optim: OptimConfig::default(),
            schedule: LrSchedule {
                initial: 0.1,
                decays: vec![(40, 0.1), (50, 0.1)],
            },
            batch_size: 128,
            seed,
            extra_epoch_evals: Vec::new(),
        }
    }

    /// Hyper-parameters after applying the method's constraints: the
    /// hard-label toy pins beta1 = beta2 = 1.
    pub fn effective_hyper(&self) -> DucatHyper {
        match self.method {
            Method::DucatHardToy => DucatHyper::hard_toy(self.hyper.start_epoch),
            _ => self.hyper,
        }
    }

    pub fn validate(&self) -> TrainResult<()> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if self.resume_epoch > self.epochs {
            return Err(TrainError::BadConfig(format!(
                "resume epoch {} past total epochs {}",
                self.resume_epoch, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be >= 1".into()));
        }
        if self.method.uses_dummy_head() && self.hyper.start_epoch > self.epochs {
            return Err(TrainError::BadConfig(format!(
                "start epoch {} past total epochs {}",
                self.hyper.start_epoch, self.epochs
            )));
        }
        if self.train_attack.target_mode != TargetMode::Untargeted {
            return Err(TrainError::BadConfig(
                "training adversary must be untargeted".into(),
            ));
        }
        self.effective_hyper().validate()?;
        self.train_attack.validate()?;
        for (_, spec) in &self.extra_epoch_evals {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Per-epoch metrics; accuracies are percentages over the test split.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    /// (adversary name, robust accuracy); index 0 is the training
    /// adversary.
    pub robust: Vec<(String, f64)>,
    pub dummy_hit_benign: f64,
    pub dummy_hit_adv: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose checkpoint maximizes training-adversary robust accuracy
    /// (earliest on ties).
    pub best_epoch: usize,
}

impl RunRecord {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

pub struct TrainOutput {
    pub best_model: MlpModel,
    pub final_model: MlpModel,
    pub record: RunRecord,
}

/// Momentum buffers, one per parameter tensor.
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &[Tensor]) -> Self {
        SgdState {
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// `v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v`.
///
/// Parameters with no populated gradient contribute g = 0 (weight decay
/// still applies).
pub fn sgd_update(
    params: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> TrainResult<()> {
    if params.len() != state.velocity.len() {
        return Err(TrainError::BadConfig(format!(
            "optimizer state holds {} buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    for (p, v) in params.iter().zip(state.velocity.iter_mut()) {
        let mut theta = p.items();
        if v.len() != theta.len() {
            return Err(TrainError::BadConfig("state buffer shape mismatch".into()));
        }
        let grad = p.grad();
        for i in 0..theta.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            v[i] = momentum * v[i] + g + weight_decay * theta[i];
            theta[i] -= lr * v[i];
        }
        p.set_data(&theta);
    }
    Ok(())
}

/// Seeded order in which one epoch visits the training set.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(derive_seed(seed, "shuffle", &[epoch as u64]));
    rng.shuffle(&mut indices);
    indices
}

/// Seed stream for the training adversary at one batch.
pub fn train_attack_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    derive_seed(seed, "train-attack", &[epoch as u64, batch as u64])
}

/// Seed stream for per-epoch evaluation adversaries.
pub fn eval_attack_seed(seed: u64, epoch: usize, adversary: usize) -> u64 {
    derive_seed(seed, "eval-attack", &[epoch as u64, adversary as u64])
}

fn check_labels(dataset: &Dataset, c: usize) -> TrainResult<()> {
    for (i, &l) in dataset.labels().iter().enumerate() {
        if l >= c {
            return Err(TrainError::LabelOutOfRange { index: i, label: l, c });
        }
    }
    Ok(())
}

fn onehot(ys: &[usize], width: usize) -> Tensor {
    let mut data = vec![0.0; ys.len() * width];
    for (i, &y) in ys.iter().enumerate() {
        data[i * width + y] = 1.0;
    }
    Tensor::new(&[ys.len(), width], data).expect("one-hot rows are finite")
}

/// Plain adversarial-CE loss on one batch: the PGD-AT objective. A doubled
/// head is attacked and supervised through its first C logits only.
fn pgd_at_loss(
    model: &MlpModel,
    x_adv: &Tensor,
    ys: &[usize],
) -> TrainResult<Tensor> {
    let c = model.num_classes();
    let mut logits = model.forward(x_adv)?;
    if model.head_mode() == HeadMode::Ducat {
        logits = logits.slice_cols(0, c)?;
    }
    Ok(logits.cross_entropy(&onehot(ys, c))?)
}

/// One PGD-AT step: attack the batch, descend cross-entropy on the
/// adversarial samples, update parameters. Returns the batch loss.
pub fn pgd_at_step(
    model: &MlpModel,
    x: &Tensor,
    ys: &[usize],
    attack: &AttackSpec,
    state: &mut SgdState,
    lr: f64,
    optim: &OptimConfig,
) -> TrainResult<f64> {
    let mut spec = attack.clone();
    if model.head_mode() == HeadMode::Ducat {
        spec.loss_head = LossHead::OriginalOnly;
    }
    let adv = pgd(model, x, ys, &spec)?;
    let loss = pgd_at_loss(model, &adv.x_adv, ys)?;
    let value = loss.item();
    model.zero_grads();
    backward(&loss)?;
    let params = model.params();
    sgd_update(&params, state, lr, optim.momentum, optim.weight_decay)?;
    model.zero_grads();
    Ok(value)
}

/// Trains from scratch per the configured method.
pub fn train(
    config: &TrainConfig,
    arch: &ModelArch,
    train_set: &Dataset,
    test_set: &Dataset,
) -> TrainResult<TrainOutput> {
    config.validate()?;
    let c = train_set.num_classes();
    let base = MlpModel::new(train_set.dim(), &arch.hidden, c, &arch.init_spec())?;
    let model = if config.method.uses_dummy_head() {
        base.double_last_layer(&arch.dummy_init_spec(), arch.dummy_perm.clone())?
    } else {
        base
    };
    run_loop(config, model, train_set, test_set)
}

/// Resumes a dummy-class run from a trained checkpoint (the fine-tuning
/// mode): a standard-head source is doubled at the resume instant, a
/// doubled source continues as-is provided the warmup phase is over.
pub fn resume(
    source: &MlpModel,
    config: &TrainConfig,
    arch: &ModelArch,
    train_set: &Dataset,
    test_set: &Dataset,
) -> TrainResult<TrainOutput> {
    config.validate()?;
    if !config.method.uses_dummy_head() {
        return Err(TrainError::BadConfig(
            "resume fine-tuning applies to dummy-class methods".into(),
        ));
    }
    let model = match source.head_mode() {
        HeadMode::Standard => {
            source.double_last_layer(&arch.dummy_init_spec(), arch.dummy_perm.clone())?
        }
        HeadMode::Ducat => {
            if config.resume_epoch < config.effective_hyper().start_epoch {
                return Err(TrainError::ResumeNeedsDoubledStart {
                    resume_epoch: config.resume_epoch,
                    start_epoch: config.effective_hyper().start_epoch,
                });
            }
            source.clone_model()
        }
    };
    run_loop(config, model, train_set, test_set)
}

fn run_loop(
    config: &TrainConfig,
    model: MlpModel,
    train_set: &Dataset,
    test_set: &Dataset,
) -> TrainResult<TrainOutput> {
    let c = train_set.num_classes();
    check_labels(train_set, c)?;
    check_labels(test_set, c)?;
    if train_set.dim() != test_set.dim() || test_set.num_classes() != c {
        return Err(TrainError::BadConfig(
            "train and test splits disagree on shape".into(),
        ));
    }
    if model.input_dim() != train_set.dim() {
        return Err(TrainError::BadConfig(format!(
            "model input dim {} vs dataset dim {}",
            model.input_dim(),
            train_set.dim()
        )));
    }

    let hyper = config.effective_hyper();
    let params = model.params();
    let mut state = SgdState::new(&params);
    let mut record = RunRecord {
        epochs: Vec::new(),
        best_epoch: config.resume_epoch,
    };
    let mut best_robust = f64::NEG_INFINITY;
    let mut best_model = model.clone_model();
    let n = train_set.n();

    for epoch in config.resume_epoch..config.epochs {
        let lr = config.schedule.rate_at(epoch);
        let ducat_phase = config.method.uses_dummy_head() && epoch >= hyper.start_epoch;
        let order = epoch_permutation(config.seed, epoch, n);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, ys) = train_set.batch(chunk);
            let mut attack = config.train_attack.clone();
            attack.seed = train_attack_seed(config.seed, epoch, batch_idx);

            let loss_value = if ducat_phase {
                let adv = pgd(&model, &x, &ys, &attack)?;
                let loss = ducat_loss(&model, &x, &adv.x_adv, &ys, &hyper)?;
                let value = loss.item();
                model.zero_grads();
                backward(&loss)?;
                sgd_update(&params, &mut state, lr, config.optim.momentum, config.optim.weight_decay)?;
                model.zero_grads();
                value
            } else {
                pgd_at_step(&model, &x, &ys, &attack, &mut state, lr, &config.optim)?
            };

            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss_value;
            batches += 1;
        }

        let epoch_record = evaluate_epoch(
            config,
            &model,
            test_set,
            epoch,
            lr,
            loss_sum / batches.max(1) as f64,
        )?;
        let seen_robust = epoch_record.robust[0].1;
        if seen_robust > best_robust {
            best_robust = seen_robust;
            record.best_epoch = epoch;
            best_model = model.clone_model();
        }
        record.epochs.push(epoch_record);
    }

    Ok(TrainOutput {
        best_model,
        final_model: model,
        record,
    })
}

fn evaluate_epoch(
    config: &TrainConfig,
    model: &MlpModel,
    test_set: &Dataset,
    epoch: usize,
    lr: f64,
    train_loss: f64,
) -> TrainResult<EpochRecord> {
    let (x, ys) = test_set.full_batch();
    let clean_preds = projected_predictions(model, &x)?;
    let clean_acc = percent_correct(&clean_preds, &ys);
    let dummy_hit_benign = dummy_hit_rate(model, &x)?;

    let mut robust = Vec::with_capacity(1 + config.extra_epoch_evals.len());
    let mut dummy_hit_adv = 0.0;
    let mut evals: Vec<(String, AttackSpec)> =
        vec![("train".to_string(), config.train_attack.clone())];
    evals.extend(config.extra_epoch_evals.iter().cloned());
    for (idx, (name, spec)) in evals.iter().enumerate() {
        let mut spec = spec.clone();
        spec.seed = eval_attack_seed(config.seed, epoch, idx);
        let adv = pgd(model, &x, &ys, &spec)?;
        let preds = projected_predictions(model, &adv.x_adv)?;
        robust.push((name.clone(), percent_correct(&preds, &ys)));
        if idx == 0 {
            dummy_hit_adv = dummy_hit_rate(model, &adv.x_adv)?;
        }
    }

    Ok(EpochRecord {
        epoch,
        lr,
        train_loss,
        clean_acc,
        robust,
        dummy_hit_benign,
        dummy_hit_adv,
    })
}

fn percent_correct(preds: &[usize], ys: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(ys).filter(|(&p, &y)| p == y).count();
    100.0 * hits as f64 / preds.len() as f64
}

/// Share of raw predictions landing in dummy slots, in percent; 0 for a
/// standard head.
fn dummy_hit_rate(model: &MlpModel, x: &Tensor) -> TrainResult<f64> {
    if model.head_mode() != HeadMode::Ducat {
        return Ok(0.0);
    }
    let preds = crate::ducat::predict(model, x)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().filter(|p| p.dummy_hit).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_gaussians, GaussianSpec, Split};

    fn two_blob_data(seed: u64) -> (Dataset, Dataset) {
        let spec = GaussianSpec {
            num_classes: 2,
            dim: 2,
            per_class_n: 60,
            separation: 0.4,
            noise_sigma: 0.03,
            seed,
            rescale01: true,
        };
        (
            gen_gaussians(&spec, Split::Train).unwrap(),
            gen_gaussians(&spec, Split::Test).unwrap(),
        )
    }

    fn quick_config(method: Method, seed: u64) -> TrainConfig {
        let mut attack = AttackSpec::pgd_linf(8.0 / 255.0, 2.0 / 255.0, 5);
        attack.random_start = true;
        let mut config = TrainConfig::desk_defaults(method, attack, seed);
        config.epochs = 8;
        config.hyper.start_epoch = 4;
        config.schedule = LrSchedule {
            initial: 0.1,
            decays: vec![(6, 0.1)],
        };
        config.batch_size = 32;
        config
    }

    #[test]
    fn lr_schedule_step_decays() {
        let schedule = LrSchedule {
            initial: 0.1,
            decays: vec![(100, 0.1), (105, 0.1)],
        };
        assert!((schedule.rate_at(99) - 0.1).abs() < 1e-15);
        assert!((schedule.rate_at(100) - 0.01).abs() < 1e-15);
        assert!((schedule.rate_at(105) - 0.001).abs() < 1e-15);
        assert!((LrSchedule::constant(0.05).rate_at(1000) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn sgd_collapses_to_plain_gradient_descent() {
        let p = Tensor::new(&[2], vec![1.0, -2.0]).unwrap().requires_grad();
        let loss = p.mul(&p).unwrap().sum();
        backward(&loss).unwrap();
        let mut state = SgdState::new(&[p.clone()]);
        sgd_update(&[p.clone()], &mut state, 0.1, 0.0, 0.0).unwrap();
        // grad is 2*theta: [2, -4]
        let got = p.items();
        assert!((got[0] - 0.8).abs() < 1e-12);
        assert!((got[1] - (-1.6)).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_two_steps_constant_gradient() {
        // displacement after two steps: lr * g * (1 + 1.9)
        let p = Tensor::new(&[1], vec![0.0]).unwrap().requires_grad();
        let mut state = SgdState::new(&[p.clone()]);
        let g = 2.0;
        let lr = 0.01;
        for _ in 0..2 {
            p.zero_grad();
            let loss = p.scale(g).sum();
            backward(&loss).unwrap();
            sgd_update(&[p.clone()], &mut state, lr, 0.9, 0.0).unwrap();
        }
        let want = -lr * g * (1.0 + 1.9);
        assert!((p.items()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn sgd_weight_decay_shrinks_geometrically() {
        let p = Tensor::new(&[1], vec![4.0]).unwrap().requires_grad();
        let mut state = SgdState::new(&[p.clone()]);
        let (lr, wd) = (0.1, 0.5);
        let mut expect = 4.0;
        for _ in 0..5 {
            sgd_update(&[p.clone()], &mut state, lr, 0.0, wd).unwrap();
            expect *= 1.0 - lr * wd;
            assert!((p.items()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pgd_at_step_decreases_loss_on_frozen_batch() {
        let (train_set, _) = two_blob_data(30);
        let model = MlpModel::new(2, &[16], 2, &crate::nn::InitSpec::new(3)).unwrap();
        let indices: Vec<usize> = (0..32).collect();
        let (x, ys) = train_set.batch(&indices);
        // frozen adversary: fixed seed, so both measurements see the same batch
        let attack = AttackSpec::pgd_linf(8.0 / 255.0, 2.0 / 255.0, 3).with_seed(9);
        let params = model.params();
        let mut state = SgdState::new(&params);
        let optim = OptimConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let before = pgd_at_step(&model, &x, &ys, &attack, &mut state, 1e-3, &optim).unwrap();
        let after = pgd_at_step(&model, &x, &ys, &attack, &mut state, 1e-3, &optim).unwrap();
        assert!(after < before, "loss should drop: {before} -> {after}");
    }

    #[test]
    fn zero_budget_pgd_at_reaches_clean_erm_accuracy() {
        let (train_set, test_set) = two_blob_data(31);
        let mut config = quick_config(Method::PgdAt, 7);
        config.train_attack = AttackSpec::identity();
        config.epochs = 12;
        let out = train(&config, &ModelArch::new(vec![16], 7), &train_set, &test_set).unwrap();
        let last = out.record.epochs.last().unwrap();
        assert!(last.clean_acc > 99.0, "clean accuracy {}", last.clean_acc);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let (train_set, test_set) = two_blob_data(32);
        let config = quick_config(Method::Ducat, 9);
        let arch = ModelArch::new(vec![12], 9);
        let a = train(&config, &arch, &train_set, &test_set).unwrap();
        let b = train(&config, &arch, &train_set, &test_set).unwrap();
        assert_eq!(a.best_model.to_bytes(), b.best_model.to_bytes());
        assert_eq!(a.record.best_epoch, b.record.best_epoch);
        for (ra, rb) in a.record.epochs.iter().zip(&b.record.epochs) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.clean_acc.to_bits(), rb.clean_acc.to_bits());
        }
    }

    #[test]
    fn ducat_warmup_is_trace_identical_to_pgd_at() {
        let (train_set, test_set) = two_blob_data(33);
        let mut ducat_cfg = quick_config(Method::Ducat, 11);
        ducat_cfg.epochs = 4; // entirely inside the warmup phase
        ducat_cfg.hyper.start_epoch = 4;
        let mut at_cfg = ducat_cfg.clone();
        at_cfg.method = Method::PgdAt;

        let arch = ModelArch::new(vec![12], 11);
        let ducat_out = train(&ducat_cfg, &arch, &train_set, &test_set).unwrap();
        let at_out = train(&at_cfg, &arch, &train_set, &test_set).unwrap();
        for (a, b) in ducat_out.record.epochs.iter().zip(&at_out.record.epochs) {
            assert!(
                (a.train_loss - b.train_loss).abs() <= 1e-9,
                "epoch {}: {} vs {}",
                a.epoch,
                a.train_loss,
                b.train_loss
            );
        }
    }

    #[test]
    fn ducat_beta_collapse_matches_mixed_ce_run() {
        // beta1 = 1, beta2 = 0 turns the two-hot objective into plain mixed
        // clean+adversarial CE; a paired run computing that mixture
        // directly must produce the same per-epoch losses.
        let (train_set, test_set) = two_blob_data(34);
        let mut config = quick_config(Method::Ducat, 13);
        config.hyper.beta1 = 1.0;
        config.hyper.beta2 = 0.0;
        config.hyper.start_epoch = 0;
        config.epochs = 3;
        let arch = ModelArch::new(vec![12], 13);
        let out = train(&config, &arch, &train_set, &test_set).unwrap();

        // independent loop over public pieces with the same seeding
        let base = MlpModel::new(train_set.dim(), &arch.hidden, 2, &InitSpec::new(13)).unwrap();
        let model = base
            .double_last_layer(
                &InitSpec {
                    seed: derive_seed(13, "dummy-init", &[]),
                    dummy_row_init: DummyRowInit::Fresh,
                },
                None,
            )
            .unwrap();
        let params = model.params();
        let mut state = SgdState::new(&params);
        let mut losses = Vec::new();
        for epoch in 0..3 {
            let lr = config.schedule.rate_at(epoch);
            let order = epoch_permutation(config.seed, epoch, train_set.n());
            let mut sum = 0.0;
            let mut batches = 0;
            for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
                let (x, ys) = train_set.batch(chunk);
                let mut attack = config.train_attack.clone();
                attack.seed = train_attack_seed(config.seed, epoch, bi);
                let adv = pgd(&model, &x, &ys, &attack).unwrap();
                let target = onehot(&ys, 4); // one-hot over 2C with zeros on dummies
                let ce_clean = model.forward(&x).unwrap().cross_entropy(&target).unwrap();
                let ce_adv = model
                    .forward(&adv.x_adv)
                    .unwrap()
                    .cross_entropy(&target)
                    .unwrap();
                let loss = ce_clean.scale(0.5).add(&ce_adv.scale(0.5)).unwrap();
                sum += loss.item();
                batches += 1;
                model.zero_grads();
                backward(&loss).unwrap();
                sgd_update(&params, &mut state, lr, 0.9, 5e-4).unwrap();
                model.zero_grads();
            }
            losses.push(sum / batches as f64);
        }
        for (got, want) in out
            .record
            .epochs
            .iter()
            .map(|e| e.train_loss)
            .zip(&losses)
        {
            assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn best_checkpoint_is_argmax_of_seen_robust_accuracy() {
        let (train_set, test_set) = two_blob_data(35);
        let config = quick_config(Method::PgdAt, 15);
        let out = train(&config, &ModelArch::new(vec![12], 15), &train_set, &test_set).unwrap();
        let seen: Vec<f64> = out.record.epochs.iter().map(|e| e.robust[0].1).collect();
        let mut best = 0;
        for (i, &v) in seen.iter().enumerate() {
            if v > seen[best] {
                best = i;
            }
        }
        assert_eq!(
            out.record.best_epoch,
            out.record.epochs[best].epoch,
            "robust: {seen:?}"
        );
    }

    #[test]
    fn resume_with_no_further_epochs_is_pure_doubling() {
        let (train_set, test_set) = two_blob_data(36);
        let mut config = quick_config(Method::PgdAt, 17);
        config.epochs = 3;
        let arch = ModelArch::new(vec![12], 17);
        let source = train(&config, &arch, &train_set, &test_set).unwrap().final_model;

        let mut resume_cfg = quick_config(Method::Ducat, 17);
        resume_cfg.epochs = 3;
        resume_cfg.resume_epoch = 3;
        resume_cfg.hyper.start_epoch = 3;
        let out = resume(&source, &resume_cfg, &arch, &train_set, &test_set).unwrap();

        let doubled = source
            .double_last_layer(
                &InitSpec {
                    seed: derive_seed(17, "dummy-init", &[]),
                    dummy_row_init: DummyRowInit::Fresh,
                },
                None,
            )
            .unwrap();
        assert_eq!(out.final_model.to_bytes(), doubled.to_bytes());
    }

    #[test]
    fn resume_preserves_first_c_logits_at_resume_instant() {
        let (train_set, test_set) = two_blob_data(37);
        let mut config = quick_config(Method::PgdAt, 19);
        config.epochs = 3;
        let arch = ModelArch::new(vec![12], 19);
        let source = train(&config, &arch, &train_set, &test_set).unwrap().final_model;

        let doubled = source
            .double_last_layer(
                &InitSpec {
                    seed: derive_seed(19, "dummy-init", &[]),
                    dummy_row_init: DummyRowInit::Fresh,
                },
                None,
            )
            .unwrap();
        let (x, _) = test_set.full_batch();
        let orig = source.forward(&x).unwrap().items();
        let wide = doubled.forward(&x).unwrap().items();
        for r in 0..test_set.n() {
            for k in 0..2 {
                assert_eq!(orig[r * 2 + k].to_bits(), wide[r * 4 + k].to_bits());
            }
        }
    }

    #[test]
    fn resume_rejects_doubled_checkpoint_before_start_epoch() {
        let (train_set, test_set) = two_blob_data(38);
        let mut config = quick_config(Method::Ducat, 21);
        config.epochs = 5;
        config.hyper.start_epoch = 2;
        let arch = ModelArch::new(vec![12], 21);
        let doubled = train(&config, &arch, &train_set, &test_set).unwrap().final_model;

        let mut resume_cfg = config.clone();
        resume_cfg.resume_epoch = 1; // before start epoch, head already doubled
        resume_cfg.hyper.start_epoch = 2;
        assert!(matches!(
            resume(&doubled, &resume_cfg, &arch, &train_set, &test_set),
            Err(TrainError::ResumeNeedsDoubledStart { .. })
        ));
    }

    #[test]
    fn runaway_loss_never_completes_silently() {
        // a diverging run must abort: the trainer's loss guard in release
        // builds, or the per-op finiteness tripwire under debug assertions
        let (train_set, test_set) = two_blob_data(29);
        let mut config = quick_config(Method::PgdAt, 27);
        config.schedule = LrSchedule::constant(1e12); // guaranteed divergence
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            train(&config, &ModelArch::new(vec![8], 27), &train_set, &test_set)
        }));
        match outcome {
            Ok(Err(TrainError::NonFiniteLoss { .. })) => {}
            Err(_) => {} // debug-mode op assertion
            Ok(Ok(_)) => panic!("diverging run completed silently"),
            Ok(Err(other)) => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let attack = AttackSpec::pgd_linf(0.03, 0.01, 3);
        let mut config = TrainConfig::desk_defaults(Method::Ducat, attack, 1);
        config.batch_size = 0;
        assert!(matches!(config.validate(), Err(TrainError::BadConfig(_))));
        let attack = AttackSpec::pgd_linf(0.03, 0.01, 3);
        let mut config = TrainConfig::desk_defaults(Method::Ducat, attack, 1);
        config.resume_epoch = config.epochs + 1;
        assert!(matches!(config.validate(), Err(TrainError::BadConfig(_))));
    }

    #[test]
    fn label_out_of_range_is_reported() {
        let (train_set, test_set) = two_blob_data(39);
        let bad = Dataset::from_parts(
            train_set.features().to_vec(),
            train_set.labels().iter().map(|&l| l + 1).collect(),
            train_set.dim(),
            3,
            vec![],
        )
        .unwrap();
        let config = quick_config(Method::PgdAt, 23);
        // train split declares 3 classes, test split only 2
        match train(&config, &ModelArch::new(vec![8], 23), &bad, &test_set) {
            Err(TrainError::BadConfig(_)) => {}
            Err(other) => panic!("expected BadConfig, got {other}"),
            Ok(_) => panic!("expected split shape mismatch to fail"),
        }
    }
}
