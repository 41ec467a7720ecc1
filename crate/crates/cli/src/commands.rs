//! Subcommand implementations. Every run directory ends up with the
//! resolved config copy, the metrics log, checkpoints, and evaluation
//! tables: enough to re-derive every reported number.

use std::path::{Path, PathBuf};

use ducat_core::datasets::{save_csv, Dataset};
use ducat_core::evalkit::{
    confusion_matrix, evaluate, mean_score, nrr, overlap_histogram, toy_case_gap, transfer_matrix,
};
use ducat_core::nn::MlpModel;
use ducat_core::trainer::{resume, train, TrainOutput};

use crate::config::{parse_fraction, RunConfig};
use crate::formats::{
    self, eval_rows_from_report, render_ablate, render_budget, render_confusion, render_eval_rows,
    render_metrics, render_overlap, render_toycase, render_transfer, write_file, AblateRow,
    BudgetRow, EvalRow,
};
use crate::CliError;

fn load_checkpoint(path: &Path) -> Result<MlpModel, CliError> {
    if !path.exists() {
        return Err(CliError::usage(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    MlpModel::load_checkpoint(path).map_err(CliError::runtime_of)
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<MlpModel>, CliError> {
    paths.iter().map(|p| load_checkpoint(p)).collect()
}

fn run_training(config: &RunConfig) -> Result<TrainOutput, CliError> {
    let (train_set, test_set) = config.datasets()?;
    let train_config = config.train_config()?;
    let arch = config.model_arch()?;
    let resume_path = config.get("train.resume_checkpoint");
    let output = if train_config.resume_epoch > 0 || !resume_path.is_empty() {
        if resume_path.is_empty() {
            return Err(CliError::usage(
                "train.resume_epoch > 0 requires train.resume_checkpoint",
            ));
        }
        let source = load_checkpoint(Path::new(resume_path))?;
        resume(&source, &train_config, &arch, &train_set, &test_set)
    } else {
        train(&train_config, &arch, &train_set, &test_set)
    };
    output.map_err(CliError::runtime_of)
}

pub fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    let out_dir = config.out_dir()?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    write_file(&out_dir.join("config.resolved"), &config.render())?;

    let output = run_training(config)?;
    let run_id = config.run_id()?;
    write_file(
        &out_dir.join("metrics.csv"),
        &render_metrics(&run_id, &output.record),
    )?;
    output
        .best_model
        .save_checkpoint(&out_dir.join("best.ckpt"))
        .map_err(CliError::runtime_of)?;
    output
        .final_model
        .save_checkpoint(&out_dir.join("final.ckpt"))
        .map_err(CliError::runtime_of)?;

    let (_, test_set) = config.datasets()?;
    let specs = config.eval_attacks()?;
    let report = evaluate(&output.best_model, &test_set, &specs).map_err(CliError::runtime_of)?;
    let rows = eval_rows_from_report("best.ckpt", &config.seed()?.to_string(), &report);
    write_file(&out_dir.join("eval.csv"), &render_eval_rows(&rows))?;

    let best = output.record.best();
    println!(
        "trained {} for {} epochs; best epoch {} (clean {:.2}, seen robust {:.2}); outputs in {}",
        run_id,
        config.get("train.epochs"),
        output.record.best_epoch,
        best.map_or(f64::NAN, |e| e.clean_acc),
        best.map_or(f64::NAN, |e| e.robust[0].1),
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_eval(config: &RunConfig, checkpoints: &[PathBuf]) -> Result<(), CliError> {
    if checkpoints.is_empty() {
        return Err(CliError::usage("eval requires at least one --checkpoint"));
    }
    let models = load_checkpoints(checkpoints)?;
    let (_, test_set) = config.datasets()?;
    let specs = config.eval_attacks()?;
    let seeds = config.eval_seeds()?;

    let mut rows: Vec<EvalRow> = Vec::new();
    for (path, model) in checkpoints.iter().zip(&models) {
        let name = path.display().to_string();
        let mut per_seed: Vec<Vec<EvalRow>> = Vec::new();
        for &seed in &seeds {
            let reseeded: Vec<_> = specs
                .iter()
                .enumerate()
                .map(|(i, (n, s))| {
                    let mut s = s.clone();
                    s.seed = ducat_core::rng::derive_seed(seed, "cli-eval", &[i as u64]);
                    (n.clone(), s)
                })
                .collect();
            let report = evaluate(model, &test_set, &reseeded).map_err(CliError::runtime_of)?;
            per_seed.push(eval_rows_from_report(&name, &seed.to_string(), &report));
        }
        for seed_rows in &per_seed {
            rows.extend(seed_rows.iter().cloned());
        }
        if seeds.len() > 1 {
            // mean over seeds, one row per adversary
            for adv_idx in 0..per_seed[0].len() {
                let k = per_seed.len() as f64;
                let clean = per_seed.iter().map(|r| r[adv_idx].clean).sum::<f64>() / k;
                let robust = per_seed.iter().map(|r| r[adv_idx].robust).sum::<f64>() / k;
                let dummy = per_seed.iter().map(|r| r[adv_idx].dummy_hit_rate).sum::<f64>() / k;
                rows.push(EvalRow {
                    checkpoint: name.clone(),
                    seed: "mean".into(),
                    adversary: per_seed[0][adv_idx].adversary.clone(),
                    clean,
                    robust,
                    mean: mean_score(clean, robust),
                    nrr: nrr(clean, robust),
                    dummy_hit_rate: dummy,
                });
            }
        }
    }

    let out_dir = config.out_dir()?;
    let table = render_eval_rows(&rows);
    write_file(&out_dir.join("eval.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_analyze_overlap(config: &RunConfig, checkpoints: &[PathBuf]) -> Result<(), CliError> {
    if checkpoints.is_empty() {
        return Err(CliError::usage("overlap requires at least one --checkpoint"));
    }
    let models = load_checkpoints(checkpoints)?;
    let refs: Vec<&MlpModel> = models.iter().collect();
    let (_, test_set) = config.datasets()?;
    let spec = config.train_attack()?;
    let hist = overlap_histogram(&refs, &test_set, &spec).map_err(CliError::runtime_of)?;
    let table = render_overlap(&hist);
    write_file(&config.out_dir()?.join("overlap.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_analyze_transfer(config: &RunConfig, checkpoints: &[PathBuf]) -> Result<(), CliError> {
    if checkpoints.len() < 2 {
        return Err(CliError::usage("transfer requires at least two --checkpoint"));
    }
    let models = load_checkpoints(checkpoints)?;
    let refs: Vec<&MlpModel> = models.iter().collect();
    let (_, test_set) = config.datasets()?;
    let spec = config.train_attack()?;
    let matrix = transfer_matrix(&refs, &test_set, &spec).map_err(CliError::runtime_of)?;
    let table = render_transfer(&matrix);
    write_file(&config.out_dir()?.join("transfer.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_analyze_confusion(
    config: &RunConfig,
    checkpoints: &[PathBuf],
    attacked: bool,
) -> Result<(), CliError> {
    if checkpoints.len() != 1 {
        return Err(CliError::usage("confusion takes exactly one --checkpoint"));
    }
    let model = load_checkpoint(&checkpoints[0])?;
    let (_, test_set) = config.datasets()?;
    let spec = config.train_attack()?;
    let matrix = confusion_matrix(&model, &test_set, attacked.then_some(&spec))
        .map_err(CliError::runtime_of)?;
    let table = render_confusion(&matrix);
    write_file(&config.out_dir()?.join("confusion.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_analyze_toycase(config: &RunConfig, checkpoints: &[PathBuf]) -> Result<(), CliError> {
    if checkpoints.len() != 2 {
        return Err(CliError::usage(
            "toycase takes exactly two --checkpoint: hard-label first, two-hot second",
        ));
    }
    let hard = load_checkpoint(&checkpoints[0])?;
    let twohot = load_checkpoint(&checkpoints[1])?;
    let (_, test_set) = config.datasets()?;
    let seen = config.train_attack()?;
    let (_, strong) = config.strong_attack()?;
    let gap =
        toy_case_gap(&hard, &twohot, &test_set, &seen, &strong).map_err(CliError::runtime_of)?;
    let table = render_toycase(&gap);
    write_file(&config.out_dir()?.join("toycase.csv"), &table)?;
    print!("{table}");
    Ok(())
}

/// Sweeps one hyper-parameter over a grid, one full run per value per seed.
pub fn cmd_ablate(config: &RunConfig, dimension: &str, grid: &str) -> Result<(), CliError> {
    let key = match dimension {
        "t" => "ducat.start_epoch",
        "alpha" => "ducat.alpha",
        "beta1" => "ducat.beta1",
        "beta2" => "ducat.beta2",
        other => {
            return Err(CliError::usage(format!(
                "unknown ablation dimension '{other}' (expected t | alpha | beta1 | beta2)"
            )))
        }
    };
    let values: Vec<&str> = grid
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CliError::usage("ablate requires a non-empty --grid"));
    }
    let seeds = config.eval_seeds()?;
    let specs = config.eval_attacks()?;

    let mut rows: Vec<AblateRow> = Vec::new();
    for value in &values {
        for &seed in &seeds {
            let mut run_config = config.clone();
            run_config.set(key, *value);
            run_config.set("seed", seed.to_string());
            run_config.set("data.seed", config.seed()?.to_string());
            let output = run_training(&run_config)?;
            let (_, test_set) = run_config.datasets()?;
            let report =
                evaluate(&output.best_model, &test_set, &specs).map_err(CliError::runtime_of)?;
            for adv in &report.adversaries {
                rows.push(AblateRow {
                    dimension: dimension.to_string(),
                    value: value.to_string(),
                    seed,
                    adversary: adv.name.clone(),
                    clean: report.clean_acc,
                    robust: adv.robust_acc,
                    mean: adv.mean,
                    nrr: adv.nrr,
                });
            }
        }
    }
    let table = render_ablate(&rows);
    write_file(&config.out_dir()?.join("ablate.csv"), &table)?;
    print!("{table}");
    Ok(())
}

/// Robust accuracy per budget per checkpoint, rows ordered by epsilon; the
/// zero-budget row is the identity adversary, so its robust accuracy equals
/// clean accuracy exactly.
pub fn cmd_budget_sweep(
    config: &RunConfig,
    checkpoints: &[PathBuf],
    epsilons: &str,
) -> Result<(), CliError> {
    if checkpoints.is_empty() {
        return Err(CliError::usage("budget-sweep requires at least one --checkpoint"));
    }
    let mut budgets: Vec<f64> = epsilons
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            parse_fraction(v).ok_or_else(|| CliError::usage(format!("bad epsilon '{v}'")))
        })
        .collect::<Result<_, _>>()?;
    if budgets.is_empty() {
        return Err(CliError::usage("budget-sweep requires --epsilons"));
    }
    budgets.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let models = load_checkpoints(checkpoints)?;
    let (_, test_set) = config.datasets()?;
    let base = config.train_attack()?;

    let mut rows: Vec<BudgetRow> = Vec::new();
    for (path, model) in checkpoints.iter().zip(&models) {
        for &eps in &budgets {
            let mut spec = base.clone();
            spec.epsilon = eps;
            if eps == 0.0 {
                spec.steps = 0;
                spec.random_start = false;
            } else {
                spec.step_size = eps / 4.0;
            }
            let report = evaluate(model, &test_set, &[("sweep".into(), spec)])
                .map_err(CliError::runtime_of)?;
            let robust = report.adversaries[0].robust_acc;
            rows.push(BudgetRow {
                checkpoint: path.display().to_string(),
                epsilon: eps,
                clean: report.clean_acc,
                robust,
                mean: mean_score(report.clean_acc, robust),
                nrr: nrr(report.clean_acc, robust),
            });
        }
    }
    let table = render_budget(&rows);
    write_file(&config.out_dir()?.join("budget.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_gen_data(config: &RunConfig) -> Result<(), CliError> {
    let (train_set, test_set) = config.datasets()?;
    let out_dir = config.out_dir()?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let write = |set: &Dataset, name: &str| -> Result<(), CliError> {
        let path = out_dir.join(name);
        save_csv(set, &path).map_err(CliError::runtime_of)?;
        println!(
            "wrote {} ({} samples, {} classes, dim {})",
            path.display(),
            set.n(),
            set.num_classes(),
            set.dim()
        );
        Ok(())
    };
    write(&train_set, "train.csv")?;
    write(&test_set, "test.csv")?;
    write_file(&out_dir.join("config.resolved"), &config.render())?;
    Ok(())
}

pub fn parse_metrics_file(path: &Path) -> Result<Vec<formats::MetricRecord>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))?;
    formats::parse_metrics(&text)
}
