use std::path::{Path, PathBuf};

use cers_core::bags::generate_synthetic_bags;

use super::Ctx;
use crate::cli::SynthArgs;
use crate::error::{InModule, Result};
use crate::io::{create_dir, write_csv, ManifestRow};

pub struct SynthOutput {
    pub manifest: PathBuf,
    pub ood_manifest: Option<PathBuf>,
}

pub fn run(args: &SynthArgs, ctx: &mut Ctx) -> Result<()> {
    let b = &mut ctx.cfg.synth;
    if let Some(v) = args.bags_per_class {
        b.bags_per_class = v;
    }
    if let Some(v) = args.instances {
        b.instances_per_bag = v;
    }
    if let Some(v) = args.dim {
        b.dim = v;
    }
    if let Some(v) = args.separation {
        b.separation = v;
    }
    if let Some(v) = args.ood_bags {
        b.ood_bags = v;
    }
    write(&args.out, ctx).map(|_| ())
}

/// Writes `bags/<slide_id>.ceb`, `manifest.csv` and, with OOD bags,
/// `ood_manifest.csv` under `dir`.
pub fn write(dir: &Path, ctx: &Ctx) -> Result<SynthOutput> {
    let set = generate_synthetic_bags(&ctx.cfg.synth.spec(ctx.seed())).in_module("synth")?;
    create_dir(&dir.join("bags"))?;
    let mut rows = Vec::with_capacity(set.bags.len());
    for (bag, signal) in set.bags.iter().zip(&set.signal) {
        let rel = format!("bags/{}.ceb", bag.slide_id);
        bag.write_file(&dir.join(&rel)).in_module("synth")?;
        rows.push(ManifestRow {
            slide_id: bag.slide_id.clone(),
            label: bag.label,
            path: rel,
            n_signal: signal.len(),
        });
    }
    let manifest = dir.join("manifest.csv");
    write_csv(&manifest, &rows)?;
    let ood_manifest = if set.ood.is_empty() {
        None
    } else {
        let mut ood_rows = Vec::with_capacity(set.ood.len());
        for bag in &set.ood {
            let rel = format!("bags/{}.ceb", bag.slide_id);
            bag.write_file(&dir.join(&rel)).in_module("synth")?;
            ood_rows.push(ManifestRow {
                slide_id: bag.slide_id.clone(),
                label: None,
                path: rel,
                n_signal: 0,
            });
        }
        let p = dir.join("ood_manifest.csv");
        write_csv(&p, &ood_rows)?;
        Some(p)
    };
    log::info!("wrote {} bags and {} OOD bags to {}", set.bags.len(), set.ood.len(), dir.display());
    Ok(SynthOutput { manifest, ood_manifest })
}
