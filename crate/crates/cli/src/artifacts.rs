//! Files written by `train` and read back by `eval` and the exporters.
//!
//! A model directory holds `ensemble.txt` (tensor lines for every member,
//! the member weights and the feature scaler), `config.json`,
//! `training_log.csv` and `metrics.jsonl`.

use std::fs;
use std::path::Path;

use lit_core::data::Standardizer;
use lit_core::eval::MetricsRecord;
use lit_core::models::{Activation, MlpParams};
use lit_core::textfmt::{self, TensorLine};
use lit_core::training::{EnsembleConfig, EpochLog, TrainedEnsemble};

use crate::CliError;

pub const ENSEMBLE_FILE: &str = "ensemble.txt";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "training_log.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// A trained ensemble plus the scaling it expects its inputs in.
#[derive(Clone, Debug)]
pub struct Model {
    pub ensemble: TrainedEnsemble,
    pub scaler: Standardizer,
}

pub fn ensemble_text(e: &TrainedEnsemble, scaler: &Standardizer) -> String {
    let activation = e.members.first().map_or(e.config.activation, |m| m.activation);
    let mut out = format!("activation {activation}\n");
    textfmt::write_scalar(&mut out, "members", e.members.len() as f64);
    textfmt::write_vector(&mut out, "weights", &e.member_weights);
    for (m, p) in e.members.iter().enumerate() {
        p.write_text(&format!("m{m}"), &mut out);
    }
    scaler.write_text(&mut out);
    out
}

fn parse_ensemble_text(text: &str) -> Result<(Activation, Vec<TensorLine>), CliError> {
    let mut activation = None;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.strip_prefix("activation ") {
            Some(rest) => activation = Some(rest.trim().parse()?),
            None => lines.push(textfmt::parse_line(line, i + 1)?),
        }
    }
    let activation = activation.ok_or_else(|| CliError::Run("ensemble file has no activation line".into()))?;
    Ok((activation, lines))
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "member", "loss", "data", "penalty", "l2", "valid_nll"])?;
    for l in log {
        w.write_record([
            l.epoch.to_string(),
            l.member.map_or(String::new(), |m| m.to_string()),
            format!("{:e}", l.loss),
            format!("{:e}", l.data),
            format!("{:e}", l.penalty),
            format!("{:e}", l.l2),
            format!("{:e}", l.valid_nll),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpochLog>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64, CliError> {
            rec[k].parse().map_err(|_| CliError::Run(format!("{}: bad number `{}`", path.display(), &rec[k])))
        };
        out.push(EpochLog {
            epoch: num(0)? as usize,
            member: if rec[1].is_empty() { None } else { Some(num(1)? as usize) },
            loss: num(2)?,
            data: num(3)?,
            penalty: num(4)?,
            l2: num(5)?,
            valid_nll: num(6)?,
        });
    }
    Ok(out)
}

pub fn write_model(dir: &Path, model: &Model) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(ENSEMBLE_FILE), ensemble_text(&model.ensemble, &model.scaler))?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&model.ensemble.config)? + "\n")?;
    write_training_log(&dir.join(LOG_FILE), &model.ensemble.training_log)?;
    Ok(())
}

pub fn read_model(dir: &Path) -> Result<Model, CliError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| CliError::Config(format!("cannot read `{}`: {e}", p.display())))
    };
    let config: EnsembleConfig = serde_json::from_str(&read(CONFIG_FILE)?)?;
    let (activation, lines) = parse_ensemble_text(&read(ENSEMBLE_FILE)?)?;
    let get = |n: &str| {
        lines.iter().find(|l| l.name == n).ok_or_else(|| CliError::Run(format!("ensemble file has no `{n}` line")))
    };
    let count = get("members")?.values[0] as usize;
    let members = (0..count)
        .map(|m| MlpParams::from_tensor_lines(&format!("m{m}"), &lines, activation))
        .collect::<Result<Vec<_>, _>>()?;
    let member_weights = get("weights")?.values.clone();
    if member_weights.len() != count {
        return Err(CliError::Run(format!("{count} members but {} weights", member_weights.len())));
    }
    let scaler =
        Standardizer::from_tensor_lines(&lines)?.ok_or_else(|| CliError::Run("ensemble file has no scaler".into()))?;
    let log_path = dir.join(LOG_FILE);
    let training_log = if log_path.exists() { read_training_log(&log_path)? } else { Vec::new() };
    Ok(Model { ensemble: TrainedEnsemble { members, member_weights, config, training_log }, scaler })
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<(), CliError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line()?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Run(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}
