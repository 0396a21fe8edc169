//! Line-oriented metric files.
//!
//! Every file starts with a `# config_hash=<hex>` comment and a CSV header.
//! Values are written with shortest-roundtrip float formatting and no
//! timestamps, so identical runs produce byte-identical files.

use std::fs;
use std::path::Path;

use crate::distill::DistillEpochMetric;
use crate::error::Result;
use crate::nn::train::{EpochMetric, StepMetric};
use crate::synthesis::SynthMetric;

fn write_lines(path: &Path, config_hash: &str, header: &str, rows: Vec<String>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = format!("# config_hash={config_hash}\n{header}\n");
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_synthesis_metrics(
    path: &Path,
    config_hash: &str,
    metrics: &[SynthMetric],
) -> Result<()> {
    write_lines(
        path,
        config_hash,
        "round,timestep,l_bn,l_cls,l_adv,total",
        metrics
            .iter()
            .map(|m| {
                format!(
                    "{},{},{},{},{},{}",
                    m.round, m.timestep, m.l_bn, m.l_cls, m.l_adv, m.total
                )
            })
            .collect(),
    )
}

pub fn write_distill_metrics(
    path: &Path,
    config_hash: &str,
    metrics: &[DistillEpochMetric],
) -> Result<()> {
    write_lines(
        path,
        config_hash,
        "round,epoch,l_kl,l_msarc,total,eval_accuracy",
        metrics
            .iter()
            .map(|m| {
                format!(
                    "{},{},{},{},{},{}",
                    m.round,
                    m.epoch,
                    m.l_kl,
                    m.l_msarc,
                    m.total,
                    m.eval_accuracy.map(|a| a.to_string()).unwrap_or_default()
                )
            })
            .collect(),
    )
}

pub fn write_training_curve(
    path: &Path,
    config_hash: &str,
    metrics: &[EpochMetric],
) -> Result<()> {
    write_lines(
        path,
        config_hash,
        "epoch,loss,train_accuracy,eval_accuracy",
        metrics
            .iter()
            .map(|m| {
                format!(
                    "{},{},{},{}",
                    m.epoch,
                    m.loss,
                    m.train_accuracy,
                    m.eval_accuracy.map(|a| a.to_string()).unwrap_or_default()
                )
            })
            .collect(),
    )
}

pub fn write_step_curve(path: &Path, config_hash: &str, metrics: &[StepMetric]) -> Result<()> {
    write_lines(
        path,
        config_hash,
        "step,loss",
        metrics
            .iter()
            .map(|m| format!("{},{}", m.step, m.loss))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_carry_hash_and_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            SynthMetric {
                round: 1,
                timestep: 8,
                l_bn: 1.25,
                l_cls: 0.5,
                l_adv: -0.125,
                total: 1.625,
            },
            SynthMetric {
                round: 1,
                timestep: 6,
                l_bn: 1.0,
                l_cls: 0.25,
                l_adv: -0.0625,
                total: 1.1875,
            },
        ];
        write_synthesis_metrics(&path, "abc123", &rows).unwrap();
        let a = std::fs::read(&path).unwrap();
        write_synthesis_metrics(&path, "abc123", &rows).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("# config_hash=abc123\n"));
        assert!(text.contains("1,8,1.25,0.5,-0.125,1.625"));
    }
}
