use std::path::Path;

use cers_core::bags::{stratified_kfold, EmbeddingBag};
use cers_core::mil::{top_k_patches, train_mil, EpochRecord, GatedMilModel};
use cers_core::Exec;
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::cli::{TopkArgs, TrainMilArgs};
use crate::error::{CliError, InModule, Result};
use crate::io::{csv_bytes, labels_of, load_bags, read_json, read_manifest, write_json, write_predictions, Prediction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: GatedMilModel,
    pub folds: usize,
    pub test_fold: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub seed: u64,
    pub config_hash: String,
}

pub struct Trained {
    pub file: ModelFile,
    pub bags: Vec<EmbeddingBag>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Trained {
    pub fn predictions(&self, idx: &[usize], exec: Exec) -> Result<Vec<Prediction>> {
        let subset: Vec<EmbeddingBag> = idx.iter().map(|&i| self.bags[i].clone()).collect();
        let probs = self.file.model.predict_proba(&subset, exec).in_module("mil")?;
        Ok(subset
            .iter()
            .zip(probs)
            .map(|(b, p)| Prediction {
                slide_id: b.slide_id.clone(),
                pred: argmax(&p),
                probs: p,
            })
            .collect())
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

pub fn run(args: &TrainMilArgs, ctx: &mut Ctx) -> Result<()> {
    let b = &mut ctx.cfg.mil;
    if let Some(v) = args.folds {
        b.folds = v;
    }
    if let Some(v) = args.test_fold {
        b.test_fold = v;
    }
    if let Some(v) = args.lr {
        b.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        b.max_epochs = v;
    }
    if let Some(v) = args.patience {
        b.patience = v;
    }
    let t = train(&args.manifest, ctx)?;
    write_json(&args.out, &t.file)?;
    if let Some(p) = &args.preds {
        write_predictions(p, &t.predictions(&t.test, ctx.exec)?)?;
    }
    if let Some(p) = &args.val_preds {
        write_predictions(p, &t.predictions(&t.val, ctx.exec)?)?;
    }
    Ok(())
}

/// Stratified split with the master seed, then training with fold
/// `test_fold` held out and the next fold used for early stopping.
pub fn train(manifest: &Path, ctx: &Ctx) -> Result<Trained> {
    let block = &ctx.cfg.mil;
    block.validate()?;
    let rows = read_manifest(manifest)?;
    let labels = labels_of(&rows, manifest)?;
    let bags = load_bags(manifest, &rows)?;
    let dim = bags[0].dim();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let split = stratified_kfold(&labels, block.folds, ctx.seed()).in_module("mil")?;
    let (train, val, test) = split.train_val_test(block.test_fold);
    let arch = block.arch(dim, n_classes);
    let out = train_mil(&bags, &labels, &train, &val, arch, &block.train_config(ctx.seed())).in_module("mil")?;
    log::info!(
        "trained {} epochs, best epoch {} (val loss {:.4})",
        out.history.len(),
        out.best_epoch,
        out.history[out.best_epoch].val_loss
    );
    Ok(Trained {
        file: ModelFile {
            model: out.model,
            folds: block.folds,
            test_fold: block.test_fold,
            best_epoch: out.best_epoch,
            history: out.history,
            seed: ctx.seed(),
            config_hash: ctx.hash(),
        },
        bags,
        labels,
        train,
        val,
        test,
    })
}

#[derive(Serialize)]
struct TopkRow {
    rank: usize,
    x: i32,
    y: i32,
    attention: f64,
}

pub fn run_topk(args: &TopkArgs) -> Result<()> {
    let file: ModelFile = read_json(&args.model)?;
    let bag = EmbeddingBag::read_file(&args.bag).map_err(|e| CliError::Data(format!("{}: {e}", args.bag.display())))?;
    let top = top_k_patches(&bag, &file.model, args.k).in_module("topk")?;
    let rows: Vec<TopkRow> = top
        .iter()
        .map(|p| TopkRow {
            rank: p.rank,
            x: p.x,
            y: p.y,
            attention: p.attention,
        })
        .collect();
    let bytes = csv_bytes(&rows)?;
    match &args.out {
        Some(p) => cers_core::bags::write_atomic(p, &bytes).in_module("topk"),
        None => {
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
    }
}
