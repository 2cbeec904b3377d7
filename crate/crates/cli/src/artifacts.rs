//! Run artifacts: the metrics csv and the run summary json, written with a
//! stable schema so downstream plotting and analysis can rely on columns.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stabilitylab::metrics::{MetricRecord, WindowSummary};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Column header: run-level fields, layer-0 attention, then the per-block
/// tracked statistics (first mlp layer of each block).
pub fn csv_header(num_layers: usize) -> String {
    let mut cols = vec![
        "step".to_string(),
        "train_loss".into(),
        "eval_loss".into(),
        "lr_effective".into(),
        "log_z_mean".into(),
        "grad_global_norm".into(),
        "max_attn_logit_L0".into(),
        "q_rms_L0".into(),
        "k_rms_L0".into(),
        "cos_at_max_L0".into(),
    ];
    for i in 0..num_layers {
        cols.push(format!("grad_rms_b{i}"));
        cols.push(format!("update_rms_b{i}"));
        cols.push(format!("param_rms_b{i}"));
        cols.push(format!("block_out_rms_b{i}"));
    }
    cols.join(",")
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

pub fn write_metrics_csv(path: &Path, num_layers: usize, records: &[MetricRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&csv_header(num_layers));
    out.push('\n');
    for r in records {
        let mut row = vec![
            r.step.to_string(),
            format!("{}", r.train_loss),
            cell(r.eval_loss),
            format!("{}", r.lr_effective),
            format!("{}", r.log_z_mean),
            format!("{}", r.grad_global_norm),
            cell(r.metric("max_attn_logit_l0")),
            cell(r.metric("q_rms_l0")),
            cell(r.metric("k_rms_l0")),
            cell(r.metric("cos_at_max_l0")),
        ];
        for i in 0..num_layers {
            row.push(cell(r.metric(&format!("grad_rms_b{i}"))));
            row.push(cell(r.metric(&format!("update_rms_b{i}"))));
            row.push(cell(r.metric(&format!("param_rms_b{i}"))));
            row.push(cell(r.metric(&format!("block_out_rms_b{i}"))));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads a named column back out of a metrics csv, paired with the step.
pub fn read_metric_column(path: &Path, metric: &str) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty metrics csv")?;
    let cols: Vec<&str> = header.split(',').collect();
    let idx = cols
        .iter()
        .position(|c| c.eq_ignore_ascii_case(metric))
        .with_context(|| format!("metric {metric} not in {}", path.display()))?;
    let mut out = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() <= idx || fields[idx].is_empty() {
            continue;
        }
        let step: u64 = fields[0].parse()?;
        let value: f64 = fields[idx].parse()?;
        out.push((step, value));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_eval_loss: f64,
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_sensitivity: Option<f64>,
    pub non_embedding_params: u64,
    pub window_summaries: BTreeMap<String, WindowSummary>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let text = serde_json::to_string_pretty(value)?;
    file.write_all(text.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
