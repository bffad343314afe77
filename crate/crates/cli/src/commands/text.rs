use std::collections::BTreeMap;
use std::path::Path;

use cers_core::bags::EmbeddingBag;
use cers_core::zero_shot::{bleu_n, rouge_l, tokenize, zero_shot_classify, PromptFile, PromptSet};
use serde::Serialize;

use crate::cli::{TextmetricsArgs, ZeroshotArgs};
use crate::error::{CliError, InModule, Result};
use crate::io::{read_json, write_csv, write_json};

#[derive(Serialize)]
struct ZeroShotRow {
    index: usize,
    x: i32,
    y: i32,
    label: usize,
    class: String,
    confidence: f64,
}

pub fn run_zeroshot(args: &ZeroshotArgs) -> Result<()> {
    let file: PromptFile = read_json(&args.prompts)?;
    let prompts = PromptSet::from_file(file).in_module("zeroshot")?;
    let bag = EmbeddingBag::read_file(&args.embeddings)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.embeddings.display())))?;
    let x = bag.instances_f64();
    let mut rows = Vec::with_capacity(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let p = zero_shot_classify(row, &prompts).in_module("zeroshot")?;
        rows.push(ZeroShotRow {
            index: i,
            x: bag.coords[i].0,
            y: bag.coords[i].1,
            label: p.label,
            class: prompts.class_names()[p.label].clone(),
            confidence: p.probs[p.label],
        });
    }
    write_csv(&args.out, &rows)
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

/// `rouge_l` is the mean per-caption F1; `bleuN` is corpus BLEU.
pub fn text_metrics(cands: &[Vec<String>], refs: &[Vec<String>], names: &[String]) -> Result<BTreeMap<String, f64>> {
    if cands.len() != refs.len() {
        return Err(CliError::Data(format!(
            "{} candidate captions for {} references",
            cands.len(),
            refs.len()
        )));
    }
    if cands.is_empty() {
        return Err(CliError::Data("no captions".into()));
    }
    let mut out = BTreeMap::new();
    for name in names {
        let value = if name == "rouge_l" {
            cands.iter().zip(refs).map(|(c, r)| rouge_l(c, r)).sum::<f64>() / cands.len() as f64
        } else if let Some(n) = name.strip_prefix("bleu").and_then(|n| n.parse::<usize>().ok()) {
            bleu_n(cands, refs, n).in_module("textmetrics")?
        } else {
            return Err(CliError::Config(format!("unknown text metric {name:?}; expected rouge_l or bleuN")));
        };
        out.insert(name.clone(), value);
    }
    Ok(out)
}

pub fn run_textmetrics(args: &TextmetricsArgs) -> Result<()> {
    let cands = read_lines(&args.cand)?;
    let refs = read_lines(&args.reference)?;
    let scores = text_metrics(&cands, &refs, &args.metrics)?;
    match &args.out {
        Some(p) => write_json(p, &scores),
        None => {
            println!("{}", serde_json::to_string_pretty(&scores).map_err(|e| CliError::Data(e.to_string()))?);
            Ok(())
        }
    }
}
