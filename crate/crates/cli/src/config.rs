//! Flat key=value run configuration.
//!
//! One run is fully determined by its resolved configuration. The format is
//! a plain text file of `key = value` lines; every key is documented in the
//! schema below, unknown keys are rejected, and the resolved copy written
//! into the run directory round-trips through this parser.
//!
//! Precedence: command-line flags (`--seed`, `--out`) over `DUCAT_*`
//! environment variables over the config file over schema defaults. The
//! environment name of a key is `DUCAT_` plus the key uppercased with dots
//! replaced by underscores (`train.epochs` -> `DUCAT_TRAIN_EPOCHS`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ducat_core::adversary::{AttackSpec, LossHead, Norm, TargetMode};
use ducat_core::datasets::{gen_gaussians, gen_rings, load_csv, Dataset, GaussianSpec, RingSpec, Split};
use ducat_core::ducat::DucatHyper;
use ducat_core::nn::DummyRowInit;
use ducat_core::trainer::{LrSchedule, Method, ModelArch, OptimConfig, TrainConfig};

use crate::CliError;

pub const ENV_PREFIX: &str = "DUCAT_";

/// (key, default, documentation). The single source of truth for the
/// config surface; `ducat train --help-config` prints it.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("method", "pgd_at", "training method: pgd_at | ducat | ducat_hard_toy"),
    ("seed", "1", "run seed; drives init, shuffling, attacks, and evaluation"),
    ("out_dir", "", "output directory; empty means runs/<method>-s<seed>"),
    ("data.kind", "gaussians", "dataset generator: gaussians | rings | csv"),
    ("data.classes", "4", "number of classes (gaussians)"),
    ("data.dim", "2", "feature dimension (gaussians)"),
    ("data.per_class_train", "200", "training samples per class"),
    ("data.per_class_test", "200", "test samples per class"),
    ("data.separation", "0.14", "minimum pairwise center distance (gaussians)"),
    ("data.noise_sigma", "0.035", "per-coordinate noise sigma (gaussians)"),
    ("data.radii", "0.18,0.30", "ring radii, one per class (rings)"),
    ("data.noise", "0.02", "radial noise sigma (rings)"),
    ("data.seed", "", "dataset seed; empty means the run seed"),
    ("data.rescale01", "true", "keep features inside [0, 1]"),
    ("data.train_path", "", "training CSV path (kind = csv)"),
    ("data.test_path", "", "test CSV path (kind = csv)"),
    ("model.hidden", "64,64", "hidden layer widths"),
    ("model.init_seed", "", "weight init seed; empty means the run seed"),
    ("model.dummy_init", "fresh", "new-unit init on doubling: fresh | copy_noise:<sigma>"),
    ("model.dummy_perm", "identity", "class-to-dummy pairing: identity | comma-separated permutation"),
    ("train.epochs", "50", "total epochs T"),
    ("train.resume_epoch", "0", "resume epoch T_r (fine-tuning mode when > 0)"),
    ("train.resume_checkpoint", "", "checkpoint to resume from (required when T_r > 0)"),
    ("train.batch_size", "32", "minibatch size"),
    ("train.lr", "0.05", "initial learning rate"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "5e-4", "L2 weight decay"),
    ("train.lr_decay_epochs", "40,46", "epochs at which the rate decays"),
    ("train.lr_decay_factor", "0.1", "multiplicative decay factor"),
    ("ducat.alpha", "0.5", "benign/adversarial loss weight"),
    ("ducat.beta1", "0.75", "benign label mass on the original class"),
    ("ducat.beta2", "1.0", "adversarial label mass on the dummy class"),
    ("ducat.start_epoch", "30", "epoch t at which two-hot training activates"),
    ("attack.norm", "linf", "perturbation norm: linf | l2"),
    ("attack.epsilon", "16/255", "budget; plain float or a/b fraction"),
    ("attack.step_size", "4/255", "per-step size; plain float or a/b fraction"),
    ("attack.steps", "10", "PGD iterations of the training adversary"),
    ("attack.restarts", "1", "random restarts of the training adversary"),
    ("attack.random_start", "true", "start from a random point in the ball"),
    ("attack.loss_head", "full", "logits the adversary reads: full | original"),
    ("attack.clip", "0,1", "valid input range lo,hi or 'none'"),
    ("eval.attacks", "pgd10,pgd100x10", "report adversaries: none | fgsm | pgd<steps>[x<restarts>][@original|@full]"),
    ("eval.strong", "pgd100x10", "held-out adversary for toy-case analysis"),
    ("eval.seeds", "", "seeds for multi-seed aggregation; empty means seed,seed+1,seed+2"),
];

/// Parsed-and-resolved configuration: every schema key has a value.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn schema_default(key: &str) -> Option<&'static str> {
    SCHEMA.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

impl RunConfig {
    pub fn defaults() -> RunConfig {
        RunConfig {
            values: SCHEMA
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }

    /// Loads a config file (optional), then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::defaults();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            config.apply_text(&text)?;
        }
        config.apply_env()?;
        Ok(config)
    }

    fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::usage(format!("config line {}: expected 'key = value', got '{line}'", idx + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if schema_default(key).is_none() {
                return Err(CliError::usage(format!(
                    "config line {}: unknown key '{key}'",
                    idx + 1
                )));
            }
            if seen.iter().any(|s| s == key) {
                return Err(CliError::usage(format!(
                    "config line {}: duplicate key '{key}'",
                    idx + 1
                )));
            }
            seen.push(key.to_string());
            self.values.insert(key.to_string(), value.to_string());
        }
        Ok(())
    }

    fn apply_env(&mut self) -> Result<(), CliError> {
        let reverse: BTreeMap<String, String> = SCHEMA
            .iter()
            .map(|(k, _, _)| (env_name(k), k.to_string()))
            .collect();
        for (name, value) in std::env::vars() {
            if !name.starts_with(ENV_PREFIX) {
                continue;
            }
            match reverse.get(&name) {
                Some(key) => {
                    self.values.insert(key.clone(), value);
                }
                None => {
                    return Err(CliError::usage(format!(
                        "environment variable {name} matches no config key"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        debug_assert!(schema_default(key).is_some(), "unknown key {key}");
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .unwrap_or_else(|| panic!("key {key} missing from resolved config"))
    }

    /// Canonical text form; parseable by [`RunConfig::load`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    // ---- typed accessors ------------------------------------------------

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.get(key).parse().map_err(|_| {
            CliError::usage(format!("config key '{key}': cannot parse '{}'", self.get(key)))
        })
    }

    fn parse_fraction(&self, key: &str) -> Result<f64, CliError> {
        parse_fraction(self.get(key))
            .ok_or_else(|| CliError::usage(format!("config key '{key}': bad number '{}'", self.get(key))))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.get(key).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| {
                    CliError::usage(format!("config key '{key}': bad element '{part}'"))
                })
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn method(&self) -> Result<Method, CliError> {
        match self.get("method") {
            "pgd_at" => Ok(Method::PgdAt),
            "ducat" => Ok(Method::Ducat),
            "ducat_hard_toy" => Ok(Method::DucatHardToy),
            other => Err(CliError::usage(format!("unknown method '{other}'"))),
        }
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        let raw = self.get("out_dir");
        if raw.is_empty() {
            Ok(PathBuf::from(format!(
                "runs/{}-s{}",
                self.get("method"),
                self.seed()?
            )))
        } else {
            Ok(PathBuf::from(raw))
        }
    }

    pub fn run_id(&self) -> Result<String, CliError> {
        Ok(format!("{}-s{}", self.get("method"), self.seed()?))
    }

    fn data_seed(&self) -> Result<u64, CliError> {
        if self.get("data.seed").is_empty() {
            self.seed()
        } else {
            self.parse("data.seed")
        }
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        let seed = self.data_seed()?;
        match self.get("data.kind") {
            "gaussians" => {
                let mut spec = GaussianSpec {
                    num_classes: self.parse("data.classes")?,
                    dim: self.parse("data.dim")?,
                    per_class_n: self.parse("data.per_class_train")?,
                    separation: self.parse("data.separation")?,
                    noise_sigma: self.parse("data.noise_sigma")?,
                    seed,
                    rescale01: self.parse("data.rescale01")?,
                };
                let train = gen_gaussians(&spec, Split::Train).map_err(CliError::runtime_of)?;
                spec.per_class_n = self.parse("data.per_class_test")?;
                let test = gen_gaussians(&spec, Split::Test).map_err(CliError::runtime_of)?;
                Ok((train, test))
            }
            "rings" => {
                let mut spec = RingSpec {
                    per_class_n: self.parse("data.per_class_train")?,
                    radii: self.parse_list("data.radii")?,
                    noise: self.parse("data.noise")?,
                    seed,
                };
                let train = gen_rings(&spec, Split::Train).map_err(CliError::runtime_of)?;
                spec.per_class_n = self.parse("data.per_class_test")?;
                let test = gen_rings(&spec, Split::Test).map_err(CliError::runtime_of)?;
                Ok((train, test))
            }
            "csv" => {
                let train_path = self.get("data.train_path");
                let test_path = self.get("data.test_path");
                if train_path.is_empty() || test_path.is_empty() {
                    return Err(CliError::usage(
                        "data.kind = csv requires data.train_path and data.test_path",
                    ));
                }
                let train = load_csv(Path::new(train_path)).map_err(CliError::runtime_of)?;
                let test = load_csv(Path::new(test_path)).map_err(CliError::runtime_of)?;
                Ok((train, test))
            }
            other => Err(CliError::usage(format!("unknown data.kind '{other}'"))),
        }
    }

    pub fn model_arch(&self) -> Result<ModelArch, CliError> {
        let init_seed = if self.get("model.init_seed").is_empty() {
            self.seed()?
        } else {
            self.parse("model.init_seed")?
        };
        let dummy_row_init = match self.get("model.dummy_init") {
            "fresh" => DummyRowInit::Fresh,
            other => match other.strip_prefix("copy_noise:") {
                Some(sigma) => DummyRowInit::CopyWithNoise(sigma.parse().map_err(|_| {
                    CliError::usage(format!("model.dummy_init: bad sigma '{sigma}'"))
                })?),
                None => {
                    return Err(CliError::usage(format!(
                        "model.dummy_init: expected fresh | copy_noise:<sigma>, got '{other}'"
                    )))
                }
            },
        };
        let dummy_perm = match self.get("model.dummy_perm") {
            "identity" => None,
            list => Some(
                list.split(',')
                    .map(|part| {
                        part.trim().parse().map_err(|_| {
                            CliError::usage(format!("model.dummy_perm: bad element '{part}'"))
                        })
                    })
                    .collect::<Result<Vec<usize>, _>>()?,
            ),
        };
        Ok(ModelArch {
            hidden: self.parse_list("model.hidden")?,
            init_seed,
            dummy_row_init,
            dummy_perm,
        })
    }

    pub fn train_attack(&self) -> Result<AttackSpec, CliError> {
        let norm = match self.get("attack.norm") {
            "linf" => Norm::Linf,
            "l2" => Norm::L2,
            other => return Err(CliError::usage(format!("unknown attack.norm '{other}'"))),
        };
        let clip_range = match self.get("attack.clip") {
            "none" => None,
            pair => {
                let parts: Vec<&str> = pair.split(',').collect();
                let bad = || CliError::usage(format!("attack.clip: expected lo,hi or none, got '{pair}'"));
                if parts.len() != 2 {
                    return Err(bad());
                }
                let lo = parse_fraction(parts[0].trim()).ok_or_else(bad)?;
                let hi = parse_fraction(parts[1].trim()).ok_or_else(bad)?;
                Some((lo, hi))
            }
        };
        let loss_head = match self.get("attack.loss_head") {
            "full" => LossHead::Full,
            "original" => LossHead::OriginalOnly,
            other => return Err(CliError::usage(format!("unknown attack.loss_head '{other}'"))),
        };
        Ok(AttackSpec {
            norm,
            epsilon: self.parse_fraction("attack.epsilon")?,
            step_size: self.parse_fraction("attack.step_size")?,
            steps: self.parse("attack.steps")?,
            restarts: self.parse("attack.restarts")?,
            random_start: self.parse("attack.random_start")?,
            target_mode: TargetMode::Untargeted,
            loss_head,
            clip_range,
            seed: self.seed()?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let method = self.method()?;
        let hyper = DucatHyper {
            alpha: self.parse("ducat.alpha")?,
            beta1: self.parse("ducat.beta1")?,
            beta2: self.parse("ducat.beta2")?,
            start_epoch: self.parse("ducat.start_epoch")?,
        };
        let decay_epochs: Vec<usize> = self.parse_list("train.lr_decay_epochs")?;
        let factor: f64 = self.parse("train.lr_decay_factor")?;
        Ok(TrainConfig {
            method,
            epochs: self.parse("train.epochs")?,
            resume_epoch: self.parse("train.resume_epoch")?,
            hyper,
            train_attack: self.train_attack()?,
            optim: OptimConfig {
                momentum: self.parse("train.momentum")?,
                weight_decay: self.parse("train.weight_decay")?,
            },
            schedule: LrSchedule {
                initial: self.parse("train.lr")?,
                decays: decay_epochs.into_iter().map(|e| (e, factor)).collect(),
            },
            batch_size: self.parse("train.batch_size")?,
            seed: self.seed()?,
            extra_epoch_evals: Vec::new(),
        })
    }

    /// Named adversaries from `eval.attacks`, built on the training attack.
    pub fn eval_attacks(&self) -> Result<Vec<(String, AttackSpec)>, CliError> {
        let base = self.train_attack()?;
        self.get("eval.attacks")
            .split(',')
            .map(|token| {
                let token = token.trim();
                Ok((token.to_string(), parse_attack_token(token, &base)?))
            })
            .collect()
    }

    pub fn strong_attack(&self) -> Result<(String, AttackSpec), CliError> {
        let token = self.get("eval.strong").trim().to_string();
        let spec = parse_attack_token(&token, &self.train_attack()?)?;
        Ok((token, spec))
    }

    pub fn eval_seeds(&self) -> Result<Vec<u64>, CliError> {
        let listed: Vec<u64> = self.parse_list("eval.seeds")?;
        if listed.is_empty() {
            let seed = self.seed()?;
            Ok(vec![seed, seed + 1, seed + 2])
        } else {
            Ok(listed)
        }
    }
}

/// Accepts plain floats and `a/b` fractions (`8/255`).
pub fn parse_fraction(raw: &str) -> Option<f64> {
    if let Some((num, den)) = raw.split_once('/') {
        let num: f64 = num.trim().parse().ok()?;
        let den: f64 = den.trim().parse().ok()?;
        if den == 0.0 {
            return None;
        }
        Some(num / den)
    } else {
        raw.trim().parse().ok()
    }
}

/// Adversary tokens: `none`, `fgsm`, `pgd<steps>`, `pgd<steps>x<restarts>`,
/// with an optional `@original` / `@full` loss-head suffix. Budget, step
/// size, norm, and clipping come from the base (training) attack; `fgsm`
/// takes the classic full-budget step.
pub fn parse_attack_token(token: &str, base: &AttackSpec) -> Result<AttackSpec, CliError> {
    let bad = || CliError::usage(format!("bad adversary token '{token}'"));
    let (body, head) = match token.split_once('@') {
        None => (token, base.loss_head),
        Some((body, "original")) => (body, LossHead::OriginalOnly),
        Some((body, "full")) => (body, LossHead::Full),
        Some(_) => return Err(bad()),
    };
    let mut spec = base.clone();
    spec.loss_head = head;
    match body {
        "none" => {
            spec.epsilon = 0.0;
            spec.steps = 0;
            spec.restarts = 1;
            spec.random_start = false;
        }
        "fgsm" => {
            spec.steps = 1;
            spec.step_size = base.epsilon;
            spec.restarts = 1;
        }
        _ => {
            let rest = body.strip_prefix("pgd").ok_or_else(bad)?;
            let (steps, restarts) = match rest.split_once('x') {
                None => (rest.parse().map_err(|_| bad())?, 1),
                Some((s, r)) => (
                    s.parse().map_err(|_| bad())?,
                    r.parse().map_err(|_| bad())?,
                ),
            };
            spec.steps = steps;
            spec.restarts = restarts;
        }
    }
    Ok(spec)
}

/// One-line-per-key documentation of the schema.
pub fn schema_help() -> String {
    let mut out = String::from("configuration keys (key = default  # description):\n");
    for (key, default, doc) in SCHEMA {
        let shown = if default.is_empty() { "<empty>" } else { default };
        let _ = writeln!(out, "  {key} = {shown}  # {doc}");
    }
    let _ = writeln!(
        out,
        "\nany key can be overridden by an environment variable: {} (dots become underscores)",
        env_name("train.epochs")
    );
    out
}
