use std::path::Path;

use cers_core::adapters::{train_linear_probe, LinearClassifier, ProbeConfig, ProbeEpoch};
use cers_core::bags::EmbeddingBag;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::cli::ProbeArgs;
use crate::error::{CliError, InModule, Result};
use crate::io::write_json;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFile {
    pub classifier: LinearClassifier,
    pub lambda: f64,
    pub train_accuracy: f64,
    pub history: Vec<ProbeEpoch>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Deserialize)]
struct LabelOnly {
    label: usize,
}

/// Feature rows from a `.ceb` bag or a headered numeric CSV.
pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    if path.extension().is_some_and(|e| e == "ceb") {
        let bag = EmbeddingBag::read_file(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        return Ok(bag.instances_f64());
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut flat = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(CliError::Data(format!("{}: ragged feature rows", path.display())));
        }
        for f in rec.iter() {
            flat.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Data(format!("{}: row {}: {f:?} is not a number", path.display(), rows + 1)))?,
            );
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, width.unwrap_or(0)), flat).map_err(|e| CliError::Data(e.to_string()))
}

pub fn run(args: &ProbeArgs, ctx: &mut Ctx) -> Result<()> {
    if let Some(e) = args.epochs {
        ctx.cfg.probe.max_epochs = e;
    }
    let x = read_features(&args.features)?;
    let labels: Vec<usize> = crate::io::read_csv::<LabelOnly>(&args.labels)?
        .into_iter()
        .map(|r| r.label)
        .collect();
    if labels.len() != x.nrows() {
        return Err(CliError::Data(format!(
            "{} labels for {} feature rows",
            labels.len(),
            x.nrows()
        )));
    }
    let block = &ctx.cfg.probe;
    let cfg = ProbeConfig {
        learning_rate: block.learning_rate,
        max_epochs: block.max_epochs,
        batch_size: block.batch_size,
        seed: ctx.seed(),
        ..ProbeConfig::new(x.ncols(), args.classes)
    };
    let out = train_linear_probe(x.view(), &labels, None, &cfg).in_module("probe")?;
    let train_accuracy = out.classifier.accuracy(x.view(), &labels);
    log::info!("probe: lambda {} train accuracy {train_accuracy:.4}", out.lambda);
    write_json(
        &args.out,
        &ProbeFile {
            classifier: out.classifier,
            lambda: out.lambda,
            train_accuracy,
            history: out.history,
            seed: ctx.seed(),
            config_hash: ctx.hash(),
        },
    )
}
