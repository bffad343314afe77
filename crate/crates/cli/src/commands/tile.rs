use cers_core::tiler::{extract_patch_grid, refine_mask, sample_patch_subset, segment_tissue, SamplingStrategy, Thumbnail};

use super::Ctx;
use crate::cli::TileArgs;
use crate::error::{CliError, InModule, Result};

pub fn run(args: &TileArgs, ctx: &mut Ctx) -> Result<()> {
    let block = &mut ctx.cfg.tile;
    if let Some(v) = args.thumb_mag {
        block.grid.thumb_mag = v;
    }
    if let Some(v) = args.target_mag {
        block.grid.target_mag = v;
    }
    if let Some(v) = args.patch {
        block.grid.patch_px = v;
    }
    if let Some(v) = args.min_frac {
        block.grid.min_tissue_frac = v;
    }
    match (args.sample_fraction, args.sample_count) {
        (Some(f), _) => block.sample = Some(SamplingStrategy::Fraction(f)),
        (_, Some(c)) => block.sample = Some(SamplingStrategy::Count(c)),
        _ => {}
    }
    let block = block.clone();
    let thumb = Thumbnail::load(&args.thumb, block.grid.thumb_mag)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.thumb.display())))?;
    let seg = segment_tissue(&thumb);
    let raw = if args.uniform_as_tissue { seg.resolved_as_tissue() } else { seg.mask.clone() };
    if seg.degenerate {
        log::warn!("thumbnail has a single background-distance level; no bimodal split");
    }
    let mask = refine_mask(&raw, &block.refine, ctx.exec);
    let mut grid = extract_patch_grid(&mask, &block.grid).in_module("tile")?;
    if let Some(s) = block.sample {
        grid = sample_patch_subset(&grid, s, ctx.seed()).in_module("tile")?;
    }
    let mut bytes = Vec::new();
    grid.write_csv(&mut bytes).map_err(|e| CliError::io(&args.out, e))?;
    cers_core::bags::write_atomic(&args.out, &bytes).in_module("tile")?;
    log::info!("{} patches from {} tissue pixels", grid.len(), mask.area());
    Ok(())
}
