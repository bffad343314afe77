//! Manifest, prediction and label files, plus atomic writers.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use cers_core::bags::{write_atomic, EmbeddingBag};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, InModule, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub slide_id: String,
    pub label: Option<usize>,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub n_signal: usize,
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_err(path, e))
}

/// Serializes rows to CSV in memory, then writes atomically.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?).in_module("io")
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).in_module("io")
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let rows: Vec<ManifestRow> = read_csv(path)?;
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: manifest is empty", path.display())));
    }
    Ok(rows)
}

pub fn resolve(manifest: &Path, row: &ManifestRow) -> PathBuf {
    let p = Path::new(&row.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads every bag; the manifest label wins over the label stored in the
/// bag file.
pub fn load_bags(manifest: &Path, rows: &[ManifestRow]) -> Result<Vec<EmbeddingBag>> {
    rows.iter()
        .map(|r| {
            let path = resolve(manifest, r);
            let mut bag = EmbeddingBag::read_file(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            if r.label.is_some() {
                bag.label = r.label;
            }
            Ok(bag)
        })
        .collect()
}

pub fn labels_of(rows: &[ManifestRow], manifest: &Path) -> Result<Vec<usize>> {
    rows.iter()
        .map(|r| {
            r.label
                .ok_or_else(|| CliError::Data(format!("{}: slide {} has no label", manifest.display(), r.slide_id)))
        })
        .collect()
}

/// Class probabilities for one slide. Written as `slide_id,pred,p0,p1,...`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub slide_id: String,
    pub pred: usize,
    pub probs: Vec<f64>,
}

pub fn prediction_bytes(preds: &[Prediction]) -> Result<Vec<u8>> {
    let c = preds.first().map_or(2, |p| p.probs.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["slide_id".to_string(), "pred".to_string()];
    header.extend((0..c).map(|k| format!("p{k}")));
    let data = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(&header).map_err(data)?;
    for p in preds {
        let mut rec = vec![p.slide_id.clone(), p.pred.to_string()];
        rec.extend(p.probs.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(data)?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    write_atomic(path, &prediction_bytes(preds)?).in_module("io")
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (id, pred) = match (col("slide_id"), col("pred")) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(CliError::Data(format!("{}: needs slide_id and pred columns", path.display()))),
    };
    let prob_cols: Vec<usize> = (0..).map_while(|k| col(&format!("p{k}"))).collect();
    if prob_cols.len() < 2 {
        return Err(CliError::Data(format!("{}: needs probability columns p0, p1, ...", path.display())));
    }
    let bad = |what: &str, line: usize| CliError::Data(format!("{}: line {line}: bad {what}", path.display()));
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let probs = prob_cols
            .iter()
            .map(|&c| rec[c].trim().parse::<f64>().map_err(|_| bad("probability", line)))
            .collect::<Result<Vec<_>>>()?;
        out.push(Prediction {
            slide_id: rec[id].to_string(),
            pred: rec[pred].trim().parse().map_err(|_| bad("pred", line))?,
            probs,
        });
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    slide_id: String,
    label: Option<usize>,
}

/// `slide_id,label` (a manifest works too); unlabeled rows are skipped.
pub fn read_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let rows: Vec<LabelRow> = read_csv(path)?;
    let mut map = HashMap::new();
    for r in rows {
        if let Some(l) = r.label {
            if map.insert(r.slide_id.clone(), l).is_some() {
                return Err(CliError::Data(format!("{}: duplicate slide {}", path.display(), r.slide_id)));
            }
        }
    }
    Ok(map)
}

/// Pairs predictions with labels by slide id.
pub fn align(preds: &[Prediction], labels: &HashMap<String, usize>) -> Result<(Vec<usize>, Vec<usize>, Vec<Vec<f64>>)> {
    let mut y = Vec::with_capacity(preds.len());
    let mut yhat = Vec::with_capacity(preds.len());
    let mut probs = Vec::with_capacity(preds.len());
    for p in preds {
        let l = labels
            .get(&p.slide_id)
            .ok_or_else(|| CliError::Data(format!("no label for slide {}", p.slide_id)))?;
        y.push(*l);
        yhat.push(p.pred);
        probs.push(p.probs.clone());
    }
    Ok((y, yhat, probs))
}
