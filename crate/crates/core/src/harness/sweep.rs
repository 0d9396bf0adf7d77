use std::fmt::Write as _;

use log::info;

use super::train::{evaluate, train};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{MccError, Result};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub report: MetricsReport,
}

/// Config key behind a sweep parameter name.
pub fn sweep_key(param: &str) -> Result<&'static str> {
    Ok(match param {
        "K" | "k" | "cpi.k" => "cpi.k",
        "lambda" | "mcc.lambda" => "mcc.lambda",
        "tau" | "mcc.tau" => "mcc.tau",
        "stages" | "model.stages" => "model.stages",
        other => {
            return Err(MccError::config(format!(
                "cannot sweep `{other}`; choose one of K, lambda, tau, stages"
            )))
        }
    })
}

/// Splits a value list. Stage lists are separated by `;` since a single
/// stage value may itself contain commas.
pub fn split_values(param: &str, values: &str) -> Vec<String> {
    let sep: &[char] = if matches!(sweep_key(param), Ok("model.stages")) { &[';'] } else { &[',', ';'] };
    values
        .split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// One full train and evaluation per value, all with the base seed.
pub fn sweep(base: &RunConfig, param: &str, values: &[String], train_set: &Dataset, eval_set: &Dataset) -> Result<Vec<SweepRow>> {
    let key = sweep_key(param)?;
    if values.is_empty() {
        return Err(MccError::config("sweep needs at least one value"));
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        cfg.set(key, v)?;
        cfg.validate()?;
        configs.push(cfg);
    }
    let mut rows = Vec::with_capacity(values.len());
    for (v, cfg) in values.iter().zip(&configs) {
        info!("sweep {key} = {v}");
        let out = train(cfg, train_set, None, None)?;
        let report = evaluate(&out.checkpoint, eval_set, cfg.threshold)?;
        rows.push(SweepRow {
            value: v.clone(),
            report,
        });
    }
    Ok(rows)
}

/// Fixed-width table with one row per swept value, metrics in percent.
pub fn render_table(param: &str, rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>9} {:>9} {:>10} {:>7} {:>7} {:>7}",
        param, "Macro F1", "Micro F1", "Samples F1", "mAP", "ACC", "AUC"
    );
    for r in rows {
        let m = &r.report;
        let auc = m.macro_auc.map_or_else(|| "n/a".to_string(), |a| format!("{:.2}", 100.0 * a));
        let _ = writeln!(
            s,
            "{:<10} {:>9.2} {:>9.2} {:>10.2} {:>7.2} {:>7.2} {:>7}",
            r.value,
            100.0 * m.macro_f1,
            100.0 * m.micro_f1,
            100.0 * m.samples_f1,
            100.0 * m.map,
            100.0 * m.accuracy,
            auc
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_splitting() {
        assert_eq!(split_values("K", "8, 64"), vec!["8", "64"]);
        assert_eq!(split_values("stages", "last:1;0,1"), vec!["last:1", "0,1"]);
        assert!(sweep_key("epochs").is_err());
    }
}
