//! Report assembly shared by `eval` and `run`.

use cers_core::metrics::{
    bootstrap_replicates, calibrate_threshold, classification_metrics, resample_indices, roc_auc, sensitivity_at,
    EvalReport, MetricValue,
};
use cers_core::Exec;
use serde::{Deserialize, Serialize};

use crate::config::EvalBlock;
use crate::error::{CliError, InModule, Result};

pub const METRICS: [&str; 7] = ["bacc", "accuracy", "auc", "f1", "precision", "sensitivity", "specificity"];

pub fn check_metric_names(names: &[String]) -> Result<()> {
    match names.iter().find(|n| !METRICS.contains(&n.as_str())) {
        Some(bad) => Err(CliError::Config(format!(
            "unknown metric {bad:?}; expected one of {}",
            METRICS.join(", ")
        ))),
        None => Ok(()),
    }
}

/// Binary AUC on the class-1 probability; macro one-vs-rest otherwise.
fn auc(y: &[usize], probs: &[Vec<f64>]) -> cers_core::Result<f64> {
    let c = probs.first().map_or(2, Vec::len);
    if c == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = y.iter().map(|&l| l == 1).collect();
        return roc_auc(&s, &pos);
    }
    let mut total = 0.0;
    let mut n = 0.0;
    for k in 0..c {
        let pos: Vec<bool> = y.iter().map(|&l| l == k).collect();
        if pos.iter().all(|&b| b) || !pos.iter().any(|&b| b) {
            continue;
        }
        let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        total += roc_auc(&s, &pos)?;
        n += 1.0;
    }
    if n == 0.0 {
        return Err(cers_core::Error::SingleClass);
    }
    Ok(total / n)
}

pub fn metric(name: &str, y: &[usize], yhat: &[usize], probs: &[Vec<f64>]) -> cers_core::Result<f64> {
    if name == "auc" {
        return auc(y, probs);
    }
    let m = classification_metrics(y, yhat)?;
    let binary_only = |v: Option<f64>| {
        v.ok_or_else(|| cers_core::Error::InvalidInput(format!("{name} is defined for binary labels only")))
    };
    Ok(match name {
        "bacc" => m.balanced_accuracy,
        "accuracy" => m.accuracy,
        "f1" => m.f1,
        "precision" => m.precision,
        "sensitivity" => binary_only(m.sensitivity)?,
        "specificity" => binary_only(m.specificity)?,
        other => return Err(cers_core::Error::InvalidInput(format!("unknown metric {other}"))),
    })
}

/// Point estimates plus percentile bootstrap intervals over resampled
/// slides. Replicates where a metric is undefined are dropped.
pub fn evaluate(
    y: &[usize],
    yhat: &[usize],
    probs: &[Vec<f64>],
    block: &EvalBlock,
    seed: u64,
    config_hash: &str,
    exec: Exec,
) -> Result<EvalReport> {
    check_metric_names(&block.metrics)?;
    let mut report = EvalReport::new(seed, block.n_bootstrap, config_hash);
    for name in &block.metrics {
        let value = metric(name, y, yhat, probs).in_module("eval")?;
        if block.n_bootstrap == 0 {
            report.insert(name.clone(), MetricValue::point(value));
            continue;
        }
        // one stream per metric keeps intervals independent of metric order
        let cfg = block.bootstrap(cers_core::rng::derive_seed(seed, metric_stream(name)));
        let ci = bootstrap_replicates(&cfg, exec, |rng| {
            let idx = resample_indices(rng, y.len());
            let ys: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let ps: Vec<usize> = idx.iter().map(|&i| yhat[i]).collect();
            let pr: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
            metric(name, &ys, &ps, &pr).unwrap_or(f64::NAN)
        })
        .in_module("eval")?;
        report.insert(name.clone(), MetricValue::with_ci(value, ci));
    }
    Ok(report)
}

fn metric_stream(name: &str) -> u64 {
    METRICS.iter().position(|m| *m == name).unwrap_or(METRICS.len()) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub positive_class: usize,
    pub target: f64,
    pub threshold: f64,
    /// Sensitivity on the calibration data at `threshold`.
    pub sensitivity: f64,
    pub n_positive: usize,
}

pub fn calibrate(y: &[usize], probs: &[Vec<f64>], positive_class: usize, target: f64) -> Result<Calibration> {
    if probs.iter().any(|p| p.len() <= positive_class) {
        return Err(CliError::Data(format!("no probability column for class {positive_class}")));
    }
    let s: Vec<f64> = probs.iter().map(|p| p[positive_class]).collect();
    let pos: Vec<bool> = y.iter().map(|&l| l == positive_class).collect();
    let threshold = calibrate_threshold(&s, &pos, target).in_module("calibrate")?;
    Ok(Calibration {
        positive_class,
        target,
        threshold,
        sensitivity: sensitivity_at(&s, &pos, threshold),
        n_positive: pos.iter().filter(|&&b| b).count(),
    })
}
