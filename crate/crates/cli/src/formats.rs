//! Metric and table files a run directory contains.
//!
//! The metrics log is an append-only CSV of one record per epoch metric
//! (`run_id,epoch,metric,value`) with monotone epochs per run. Analysis
//! tables are plain CSVs shaped for plotting. Everything written here is
//! parseable by the loaders in this module.

use std::fmt::Write as _;
use std::path::Path;

use ducat_core::evalkit::{EvalReport, GapReport, OverlapHistogram, TransferMatrix};
use ducat_core::trainer::RunRecord;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

pub fn render_metrics(run_id: &str, record: &RunRecord) -> String {
    let mut out = String::from("run_id,epoch,metric,value\n");
    for epoch in &record.epochs {
        let mut push = |metric: &str, value: f64| {
            let _ = writeln!(out, "{run_id},{},{metric},{}", epoch.epoch, fmt_value(value));
        };
        push("lr", epoch.lr);
        push("train_loss", epoch.train_loss);
        push("clean_acc", epoch.clean_acc);
        for (name, acc) in &epoch.robust {
            push(&format!("robust_acc.{name}"), *acc);
        }
        push("dummy_hit_benign", epoch.dummy_hit_benign);
        push("dummy_hit_adv", epoch.dummy_hit_adv);
    }
    let last_epoch = record.epochs.last().map_or(0, |e| e.epoch);
    let _ = writeln!(out, "{run_id},{last_epoch},best_epoch,{}", record.best_epoch);
    out
}

fn fmt_value(value: f64) -> String {
    // shortest round-trip form keeps reruns byte-identical and parseable
    format!("{value}")
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>, CliError> {
    let mut lines = text.lines();
    match lines.next() {
        Some("run_id,epoch,metric,value") => {}
        other => {
            return Err(CliError::runtime(format!(
                "metrics log: bad header {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    let mut last_epoch = 0usize;
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(4, ',').collect();
        if parts.len() != 4 {
            return Err(CliError::runtime(format!(
                "metrics log line {}: expected 4 fields",
                idx + 2
            )));
        }
        let epoch: usize = parts[1]
            .parse()
            .map_err(|_| CliError::runtime(format!("metrics log line {}: bad epoch", idx + 2)))?;
        let value: f64 = parts[3]
            .parse()
            .map_err(|_| CliError::runtime(format!("metrics log line {}: bad value", idx + 2)))?;
        if epoch < last_epoch {
            return Err(CliError::runtime(format!(
                "metrics log line {}: epochs must be monotone",
                idx + 2
            )));
        }
        last_epoch = epoch;
        records.push(MetricRecord {
            run_id: parts[0].to_string(),
            epoch,
            metric: parts[2].to_string(),
            value,
        });
    }
    Ok(records)
}

/// Long-format evaluation rows: one per (checkpoint, seed, adversary).
pub fn render_eval_rows(rows: &[EvalRow]) -> String {
    let mut out = String::from("checkpoint,seed,adversary,clean,robust,mean,nrr,dummy_hit_rate\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.checkpoint,
            row.seed,
            row.adversary,
            fmt_value(row.clean),
            fmt_value(row.robust),
            fmt_value(row.mean),
            fmt_value(row.nrr),
            fmt_value(row.dummy_hit_rate)
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub checkpoint: String,
    pub seed: String,
    pub adversary: String,
    pub clean: f64,
    pub robust: f64,
    pub mean: f64,
    pub nrr: f64,
    pub dummy_hit_rate: f64,
}

pub fn eval_rows_from_report(checkpoint: &str, seed: &str, report: &EvalReport) -> Vec<EvalRow> {
    report
        .adversaries
        .iter()
        .map(|adv| EvalRow {
            checkpoint: checkpoint.to_string(),
            seed: seed.to_string(),
            adversary: adv.name.clone(),
            clean: report.clean_acc,
            robust: adv.robust_acc,
            mean: adv.mean,
            nrr: adv.nrr,
            dummy_hit_rate: adv.dummy_hit_rate,
        })
        .collect()
}

pub fn parse_eval_rows(text: &str) -> Result<Vec<EvalRow>, CliError> {
    let mut lines = text.lines();
    match lines.next() {
        Some("checkpoint,seed,adversary,clean,robust,mean,nrr,dummy_hit_rate") => {}
        other => return Err(CliError::runtime(format!("eval table: bad header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(CliError::runtime(format!(
                "eval table line {}: expected 8 fields",
                idx + 2
            )));
        }
        let num = |i: usize| -> Result<f64, CliError> {
            parts[i].parse().map_err(|_| {
                CliError::runtime(format!("eval table line {}: bad number '{}'", idx + 2, parts[i]))
            })
        };
        rows.push(EvalRow {
            checkpoint: parts[0].to_string(),
            seed: parts[1].to_string(),
            adversary: parts[2].to_string(),
            clean: num(3)?,
            robust: num(4)?,
            mean: num(5)?,
            nrr: num(6)?,
            dummy_hit_rate: num(7)?,
        });
    }
    Ok(rows)
}

pub fn render_overlap(hist: &OverlapHistogram) -> String {
    let mut out = String::from("bucket,count\n");
    for (bucket, count) in hist.buckets.iter().enumerate() {
        let _ = writeln!(out, "{bucket},{count}");
    }
    out
}

pub fn parse_overlap(text: &str) -> Result<Vec<(usize, usize)>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some("bucket,count") {
        return Err(CliError::runtime("overlap table: bad header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (b, c) = line
                .split_once(',')
                .ok_or_else(|| CliError::runtime("overlap table: bad row"))?;
            Ok((
                b.parse().map_err(|_| CliError::runtime("overlap table: bad bucket"))?,
                c.parse().map_err(|_| CliError::runtime("overlap table: bad count"))?,
            ))
        })
        .collect()
}

pub fn render_transfer(matrix: &TransferMatrix) -> String {
    let mut out = String::from("surrogate,target,subset,rate,subset_size\n");
    for s in 0..matrix.model_count {
        for t in 0..matrix.model_count {
            let mut push = |subset: &str, rate: Option<f64>, size: usize| {
                let rate = rate.map(fmt_value).unwrap_or_default();
                let _ = writeln!(out, "{s},{t},{subset},{rate},{size}");
            };
            push("success", matrix.success_rate[s][t], matrix.success_sizes[s]);
            push("fail", matrix.fail_rate[s][t], matrix.fail_sizes[s]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub surrogate: usize,
    pub target: usize,
    pub success_subset: bool,
    pub rate: Option<f64>,
    pub subset_size: usize,
}

pub fn parse_transfer(text: &str) -> Result<Vec<TransferRow>, CliError> {
    let body = expect_header(text, "surrogate,target,subset,rate,subset_size", "transfer table")?;
    body.map(|(line_no, line)| {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(CliError::runtime(format!(
                "transfer table line {line_no}: expected 5 fields"
            )));
        }
        let rate = if parts[3].is_empty() {
            None
        } else {
            Some(parse_num(parts[3], "transfer table", line_no)?)
        };
        Ok(TransferRow {
            surrogate: parse_int(parts[0], "transfer table", line_no)?,
            target: parse_int(parts[1], "transfer table", line_no)?,
            success_subset: parts[2] == "success",
            rate,
            subset_size: parse_int(parts[4], "transfer table", line_no)?,
        })
    })
    .collect()
}

pub fn render_confusion(matrix: &[Vec<usize>]) -> String {
    let mut out = String::from("true_class,predicted_class,count\n");
    for (t, row) in matrix.iter().enumerate() {
        for (p, count) in row.iter().enumerate() {
            let _ = writeln!(out, "{t},{p},{count}");
        }
    }
    out
}

pub fn parse_confusion(text: &str) -> Result<Vec<Vec<usize>>, CliError> {
    let body = expect_header(text, "true_class,predicted_class,count", "confusion table")?;
    let mut cells = Vec::new();
    for (line_no, line) in body {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(CliError::runtime(format!(
                "confusion table line {line_no}: expected 3 fields"
            )));
        }
        cells.push((
            parse_int(parts[0], "confusion table", line_no)?,
            parse_int(parts[1], "confusion table", line_no)?,
            parse_int(parts[2], "confusion table", line_no)?,
        ));
    }
    let c = cells.iter().map(|&(t, p, _)| t.max(p) + 1).max().unwrap_or(0);
    let mut matrix = vec![vec![0usize; c]; c];
    for (t, p, count) in cells {
        matrix[t][p] = count;
    }
    Ok(matrix)
}

/// Skips the header (validating it) and yields (line number, line) pairs.
fn expect_header<'a>(
    text: &'a str,
    header: &str,
    what: &str,
) -> Result<impl Iterator<Item = (usize, &'a str)>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(CliError::runtime(format!("{what}: bad header")));
    }
    Ok(lines
        .enumerate()
        .map(|(i, l)| (i + 2, l))
        .filter(|(_, l)| !l.trim().is_empty()))
}

fn parse_num(raw: &str, what: &str, line_no: usize) -> Result<f64, CliError> {
    raw.parse()
        .map_err(|_| CliError::runtime(format!("{what} line {line_no}: bad number '{raw}'")))
}

fn parse_int(raw: &str, what: &str, line_no: usize) -> Result<usize, CliError> {
    raw.parse()
        .map_err(|_| CliError::runtime(format!("{what} line {line_no}: bad integer '{raw}'")))
}

pub fn render_toycase(gap: &GapReport) -> String {
    let mut out = String::from("model,seen_robust,strong_robust,gap\n");
    let _ = writeln!(
        out,
        "hard_label,{},{},{}",
        fmt_value(gap.hard_seen),
        fmt_value(gap.hard_strong),
        fmt_value(gap.hard_gap)
    );
    let _ = writeln!(
        out,
        "two_hot,{},{},{}",
        fmt_value(gap.twohot_seen),
        fmt_value(gap.twohot_strong),
        fmt_value(gap.twohot_gap)
    );
    out
}

pub fn parse_toycase(text: &str) -> Result<GapReport, CliError> {
    let body = expect_header(text, "model,seen_robust,strong_robust,gap", "toycase table")?;
    let mut hard = None;
    let mut twohot = None;
    for (line_no, line) in body {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(CliError::runtime(format!(
                "toycase table line {line_no}: expected 4 fields"
            )));
        }
        let cells = (
            parse_num(parts[1], "toycase table", line_no)?,
            parse_num(parts[2], "toycase table", line_no)?,
            parse_num(parts[3], "toycase table", line_no)?,
        );
        match parts[0] {
            "hard_label" => hard = Some(cells),
            "two_hot" => twohot = Some(cells),
            other => {
                return Err(CliError::runtime(format!(
                    "toycase table line {line_no}: unknown model '{other}'"
                )))
            }
        }
    }
    match (hard, twohot) {
        (Some(h), Some(t)) => Ok(GapReport {
            hard_seen: h.0,
            hard_strong: h.1,
            hard_gap: h.2,
            twohot_seen: t.0,
            twohot_strong: t.1,
            twohot_gap: t.2,
        }),
        _ => Err(CliError::runtime("toycase table: missing rows")),
    }
}

#[derive(Debug, Clone)]
pub struct AblateRow {
    pub dimension: String,
    pub value: String,
    pub seed: u64,
    pub adversary: String,
    pub clean: f64,
    pub robust: f64,
    pub mean: f64,
    pub nrr: f64,
}

pub fn render_ablate(rows: &[AblateRow]) -> String {
    let mut out = String::from("dimension,value,seed,adversary,clean,robust,mean,nrr\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.dimension,
            row.value,
            row.seed,
            row.adversary,
            fmt_value(row.clean),
            fmt_value(row.robust),
            fmt_value(row.mean),
            fmt_value(row.nrr)
        );
    }
    out
}

pub fn parse_ablate(text: &str) -> Result<Vec<AblateRow>, CliError> {
    let body = expect_header(
        text,
        "dimension,value,seed,adversary,clean,robust,mean,nrr",
        "ablate table",
    )?;
    body.map(|(line_no, line)| {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(CliError::runtime(format!(
                "ablate table line {line_no}: expected 8 fields"
            )));
        }
        Ok(AblateRow {
            dimension: parts[0].to_string(),
            value: parts[1].to_string(),
            seed: parts[2].parse().map_err(|_| {
                CliError::runtime(format!("ablate table line {line_no}: bad seed"))
            })?,
            adversary: parts[3].to_string(),
            clean: parse_num(parts[4], "ablate table", line_no)?,
            robust: parse_num(parts[5], "ablate table", line_no)?,
            mean: parse_num(parts[6], "ablate table", line_no)?,
            nrr: parse_num(parts[7], "ablate table", line_no)?,
        })
    })
    .collect()
}

#[derive(Debug, Clone)]
pub struct BudgetRow {
    pub checkpoint: String,
    pub epsilon: f64,
    pub clean: f64,
    pub robust: f64,
    pub mean: f64,
    pub nrr: f64,
}

pub fn render_budget(rows: &[BudgetRow]) -> String {
    let mut out = String::from("checkpoint,epsilon,clean,robust,mean,nrr\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.checkpoint,
            fmt_value(row.epsilon),
            fmt_value(row.clean),
            fmt_value(row.robust),
            fmt_value(row.mean),
            fmt_value(row.nrr)
        );
    }
    out
}

pub fn parse_budget(text: &str) -> Result<Vec<BudgetRow>, CliError> {
    let body = expect_header(text, "checkpoint,epsilon,clean,robust,mean,nrr", "budget table")?;
    body.map(|(line_no, line)| {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(CliError::runtime(format!(
                "budget table line {line_no}: expected 6 fields"
            )));
        }
        Ok(BudgetRow {
            checkpoint: parts[0].to_string(),
            epsilon: parse_num(parts[1], "budget table", line_no)?,
            clean: parse_num(parts[2], "budget table", line_no)?,
            robust: parse_num(parts[3], "budget table", line_no)?,
            mean: parse_num(parts[4], "budget table", line_no)?,
            nrr: parse_num(parts[5], "budget table", line_no)?,
        })
    })
    .collect()
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}
