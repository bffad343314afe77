use std::path::Path;

use cers_core::bags::stratified_kfold;
use cers_core::metrics::BootstrapConfig;
use cers_core::mil::GatedMilModel;
use cers_core::open_set::{
    bimodal_threshold, confidence_gap, detect_ood, train_arpl_on_bags, ConfidenceGap, ReciprocalPointHead,
};
use cers_core::Exec;
use serde::{Deserialize, Serialize};

use super::mil::ModelFile;
use super::Ctx;
use crate::cli::{DetectArgs, TrainArplArgs};
use crate::error::{CliError, InModule, Result};
use crate::io::{labels_of, load_bags, read_csv, read_json, read_manifest, write_csv, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadFile {
    pub head: ReciprocalPointHead,
    /// Jointly tuned MIL body; absent when the body stayed frozen.
    pub model: Option<GatedMilModel>,
    pub closed_set_bacc: f64,
    pub history: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub slide_id: String,
    pub confidence: f64,
    #[serde(default)]
    pub is_ood: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagRow {
    pub slide_id: String,
    pub confidence: f64,
    pub flag: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub threshold: f64,
    pub n_known: usize,
    pub n_ood: usize,
    pub n_flagged: usize,
    pub detection_rate: Option<f64>,
    pub false_alarm_rate: Option<f64>,
    pub gap: Option<ConfidenceGap>,
    pub seed: u64,
    pub config_hash: String,
}

pub fn run_train(args: &TrainArplArgs, ctx: &mut Ctx) -> Result<()> {
    if args.joint {
        ctx.cfg.arpl.joint = true;
    }
    if let Some(e) = args.epochs {
        ctx.cfg.arpl.epochs = e;
    }
    let model: ModelFile = read_json(&args.model)?;
    let (head, scores) = train(&args.manifest, args.ood_manifest.as_deref(), &model, ctx)?;
    write_json(&args.out, &head)?;
    if let Some(p) = &args.scores {
        write_csv(p, &scores)?;
    }
    Ok(())
}

/// Fits the head on the folds the MIL model trained on (same split as the
/// model file) and scores the held-out fold plus any OOD bags.
pub fn train(manifest: &Path, ood_manifest: Option<&Path>, model: &ModelFile, ctx: &Ctx) -> Result<(HeadFile, Vec<ScoreRow>)> {
    let rows = read_manifest(manifest)?;
    let labels = labels_of(&rows, manifest)?;
    let bags = load_bags(manifest, &rows)?;
    let split = stratified_kfold(&labels, model.folds, model.seed).in_module("train-arpl")?;
    let (mut fit, val, test) = split.train_val_test(model.test_fold);
    fit.extend(val);
    fit.sort_unstable();
    let fit_bags: Vec<_> = fit.iter().map(|&i| bags[i].clone()).collect();
    let fit_labels: Vec<usize> = fit.iter().map(|&i| labels[i]).collect();
    let cfg = ctx.cfg.arpl.arpl_config(ctx.seed());
    let out = train_arpl_on_bags(&fit_bags, &fit_labels, &model.model, &cfg, ctx.exec).in_module("train-arpl")?;
    log::info!("ARPL closed-set B-ACC on training folds {:.4}", out.closed_set_bacc);
    let body = out.model.as_ref().unwrap_or(&model.model);
    let mut scored: Vec<(cers_core::bags::EmbeddingBag, u8)> = test.iter().map(|&i| (bags[i].clone(), 0)).collect();
    if let Some(p) = ood_manifest {
        let ood_rows = read_manifest(p)?;
        scored.extend(load_bags(p, &ood_rows)?.into_iter().map(|b| (b, 1)));
    }
    let scores = score_bags(&out.head, body, &scored, ctx.exec)?;
    let file = HeadFile {
        head: out.head,
        model: out.model,
        closed_set_bacc: out.closed_set_bacc,
        history: out.history,
        seed: ctx.seed(),
        config_hash: ctx.hash(),
    };
    Ok((file, scores))
}

fn score_bags(
    head: &ReciprocalPointHead,
    body: &GatedMilModel,
    bags: &[(cers_core::bags::EmbeddingBag, u8)],
    exec: Exec,
) -> Result<Vec<ScoreRow>> {
    let only: Vec<_> = bags.iter().map(|(b, _)| b.clone()).collect();
    let zs = body.embed(&only, exec).in_module("train-arpl")?;
    zs.iter()
        .zip(bags)
        .map(|(z, (b, ood))| {
            let s = head.score(z.view()).in_module("train-arpl")?;
            Ok(ScoreRow {
                slide_id: b.slide_id.clone(),
                confidence: s.confidence,
                is_ood: Some(*ood),
            })
        })
        .collect()
}

pub fn run_detect(args: &DetectArgs, ctx: &mut Ctx) -> Result<()> {
    if let Some(h) = &args.head {
        let head: HeadFile = read_json(h)?;
        log::info!("head trained with config {}", head.config_hash);
    }
    let scores: Vec<ScoreRow> = read_csv(&args.scores)?;
    let n_boot = ctx.cfg.arpl.n_bootstrap;
    let (flags, summary) = detect(&scores, args.threshold, n_boot, ctx)?;
    write_csv(&args.out, &flags)?;
    match &args.summary {
        Some(p) => write_json(p, &summary),
        None => {
            println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| CliError::Data(e.to_string()))?);
            Ok(())
        }
    }
}

/// Flags confidences below the threshold (Otsu over all scores unless one
/// is given). Rows without `is_ood` count as known. The confidence gap is
/// reported when both groups have at least two members.
pub fn detect(scores: &[ScoreRow], threshold: Option<f64>, n_boot: usize, ctx: &Ctx) -> Result<(Vec<FlagRow>, DetectSummary)> {
    if scores.is_empty() {
        return Err(CliError::Data("no confidence scores".into()));
    }
    let conf: Vec<f64> = scores.iter().map(|s| s.confidence).collect();
    let threshold = match threshold {
        Some(t) => t,
        None => bimodal_threshold(&conf).in_module("detect")?,
    };
    let is_ood: Vec<bool> = scores.iter().map(|s| s.is_ood == Some(1)).collect();
    let det = detect_ood(&conf, &is_ood, threshold).in_module("detect")?;
    let known: Vec<f64> = scores.iter().filter(|s| s.is_ood != Some(1)).map(|s| s.confidence).collect();
    let ood: Vec<f64> = scores.iter().filter(|s| s.is_ood == Some(1)).map(|s| s.confidence).collect();
    let gap = if known.len() >= 2 && ood.len() >= 2 && n_boot > 0 {
        let cfg = BootstrapConfig {
            n_boot,
            seed: ctx.seed(),
            ..BootstrapConfig::default()
        };
        Some(confidence_gap(&known, &ood, &cfg, ctx.exec).in_module("detect")?)
    } else {
        None
    };
    let flags: Vec<FlagRow> = scores
        .iter()
        .zip(&det.flags)
        .map(|(s, &f)| FlagRow {
            slide_id: s.slide_id.clone(),
            confidence: s.confidence,
            flag: u8::from(f),
        })
        .collect();
    let summary = DetectSummary {
        threshold,
        n_known: known.len(),
        n_ood: ood.len(),
        n_flagged: det.flags.iter().filter(|&&f| f).count(),
        detection_rate: det.detection_rate.filter(|_| !ood.is_empty()),
        false_alarm_rate: det.false_alarm_rate.filter(|_| !known.is_empty()),
        gap,
        seed: ctx.seed(),
        config_hash: ctx.hash(),
    };
    Ok((flags, summary))
}
