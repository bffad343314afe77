use cers_core::metrics::EvalReport;

use super::Ctx;
use crate::cli::{CalibrateArgs, EvalArgs, ReportArgs, ReportFormat};
use crate::error::{CliError, InModule, Result};
use crate::evaluate::{calibrate, check_metric_names, evaluate};
use crate::io::{align, read_labels, read_predictions, write_json};

pub fn run_eval(args: &EvalArgs, ctx: &mut Ctx) -> Result<()> {
    if let Some(m) = &args.metrics {
        ctx.cfg.eval.metrics = m.clone();
    }
    if let Some(b) = args.bootstrap {
        ctx.cfg.eval.n_bootstrap = b;
    }
    check_metric_names(&ctx.cfg.eval.metrics)?;
    let preds = read_predictions(&args.preds)?;
    let labels = read_labels(&args.labels)?;
    let (y, yhat, probs) = align(&preds, &labels)?;
    let report = evaluate(&y, &yhat, &probs, &ctx.cfg.eval, ctx.seed(), &ctx.hash(), ctx.exec)?;
    write_report(&report, &args.out)?;
    if let Some(p) = &args.csv {
        cers_core::bags::write_atomic(p, report.to_csv().as_bytes()).in_module("eval")?;
    }
    Ok(())
}

pub fn write_report(report: &EvalReport, path: &std::path::Path) -> Result<()> {
    let json = report.to_json().in_module("report")?;
    cers_core::bags::write_atomic(path, json.as_bytes()).in_module("report")
}

pub fn run_calibrate(args: &CalibrateArgs, ctx: &mut Ctx) -> Result<()> {
    if let Some(t) = args.target {
        ctx.cfg.eval.sensitivity_target = t;
    }
    let preds = read_predictions(&args.preds)?;
    let labels = read_labels(&args.labels)?;
    let (y, _, probs) = align(&preds, &labels)?;
    let cal = calibrate(&y, &probs, args.positive_class, ctx.cfg.eval.sensitivity_target)?;
    match &args.out {
        Some(p) => write_json(p, &cal),
        None => {
            println!("{}", serde_json::to_string_pretty(&cal).map_err(|e| CliError::Data(e.to_string()))?);
            Ok(())
        }
    }
}

pub fn run_report(args: &ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let report = EvalReport::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", args.input.display())))?;
    match args.format {
        ReportFormat::Json => write_report(&report, &args.out),
        ReportFormat::Csv => cers_core::bags::write_atomic(&args.out, report.to_csv().as_bytes()).in_module("report"),
    }
}
