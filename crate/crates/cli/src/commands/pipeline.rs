use std::path::Path;

use cers_core::metrics::{sensitivity_at, EvalReport, MetricValue};

use super::{mil, open_set, synth, Ctx};
use crate::cli::RunArgs;
use crate::commands::eval::write_report;
use crate::error::{InModule, Result};
use crate::evaluate::{calibrate, evaluate};
use crate::io::{create_dir, write_csv, write_json, write_predictions};

pub fn run(args: &RunArgs, ctx: &mut Ctx) -> Result<()> {
    run_pipeline(&args.out, ctx).map(|_| ())
}

/// synth, train-mil, eval and calibrate, then ARPL training and OOD
/// detection when the synthetic spec asks for OOD bags. Every artifact goes
/// under `dir`; the report is also returned.
pub fn run_pipeline(dir: &Path, ctx: &Ctx) -> Result<EvalReport> {
    ctx.cfg.mil.validate()?;
    crate::evaluate::check_metric_names(&ctx.cfg.eval.metrics)?;
    create_dir(dir)?;
    write_json(&dir.join("config.json"), &ctx.cfg)?;
    let data = synth::write(dir, ctx)?;

    let trained = mil::train(&data.manifest, ctx)?;
    write_json(&dir.join("model.json"), &trained.file)?;
    let test = trained.predictions(&trained.test, ctx.exec)?;
    let val = trained.predictions(&trained.val, ctx.exec)?;
    write_predictions(&dir.join("preds.csv"), &test)?;
    write_predictions(&dir.join("val_preds.csv"), &val)?;

    let y_test: Vec<usize> = trained.test.iter().map(|&i| trained.labels[i]).collect();
    let yhat: Vec<usize> = test.iter().map(|p| p.pred).collect();
    let probs: Vec<Vec<f64>> = test.iter().map(|p| p.probs.clone()).collect();
    let mut report = evaluate(&y_test, &yhat, &probs, &ctx.cfg.eval, ctx.seed(), &ctx.hash(), ctx.exec)?;

    // threshold from the validation fold, applied to the test fold
    let y_val: Vec<usize> = trained.val.iter().map(|&i| trained.labels[i]).collect();
    let val_probs: Vec<Vec<f64>> = val.iter().map(|p| p.probs.clone()).collect();
    if probs.first().is_some_and(|p| p.len() == 2) {
        let cal = calibrate(&y_val, &val_probs, 1, ctx.cfg.eval.sensitivity_target)?;
        write_json(&dir.join("calibration.json"), &cal)?;
        report.insert("threshold", MetricValue::point(cal.threshold));
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = y_test.iter().map(|&l| l == 1).collect();
        if pos.iter().any(|&b| b) {
            report.insert("sensitivity_at_threshold", MetricValue::point(sensitivity_at(&s, &pos, cal.threshold)));
        }
    }

    if let Some(ood) = &data.ood_manifest {
        let (head, scores) = open_set::train(&data.manifest, Some(ood), &trained.file, ctx)?;
        write_json(&dir.join("head.json"), &head)?;
        write_csv(&dir.join("ood_scores.csv"), &scores)?;
        let (flags, summary) = open_set::detect(&scores, None, ctx.cfg.arpl.n_bootstrap, ctx)?;
        write_csv(&dir.join("detect.csv"), &flags)?;
        write_json(&dir.join("detect.json"), &summary)?;
        report.insert("arpl_closed_set_bacc", MetricValue::point(head.closed_set_bacc));
        report.insert("ood_threshold", MetricValue::point(summary.threshold));
        if let Some(r) = summary.detection_rate {
            report.insert("ood_detection_rate", MetricValue::point(r));
        }
        if let Some(r) = summary.false_alarm_rate {
            report.insert("ood_false_alarm_rate", MetricValue::point(r));
        }
        if let Some(g) = summary.gap {
            report.insert("ood_confidence_gap", MetricValue::with_ci(g.gap, g.ci));
        }
    }

    write_report(&report, &dir.join("report.json"))?;
    cers_core::bags::write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes()).in_module("report")?;
    Ok(report)
}
