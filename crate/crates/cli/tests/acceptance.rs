//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line; the process exits non-zero if any criterion fails.

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;
#[path = "../../core/tests/support/reference_mil.rs"]
mod reference_mil;

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cers_cli::cli::Cli;
use cers_core::adapters::{train_linear_probe, LoraConfig, LoraLayer, ProbeConfig, MAX_PROBE_EPOCHS};
use cers_core::bags::{
    few_shot_sample, generate_synthetic_bags, permute_labels, stratified_kfold, EmbeddingBag, SyntheticSet,
    SyntheticSpec,
};
use cers_core::metrics::{
    calibrate_threshold, classification_metrics, cluster_stats, roc_auc, sensitivity_at, wasserstein_1d,
};
use cers_core::mil::{cross_validate, top_k_patches, train_mil, GatedMilModel, MilArch, TrainConfig};
use cers_core::open_set::{bimodal_threshold, detect_ood, train_arpl_on_bags, ArplConfig};
use cers_core::tiler::{extract_patch_grid, patch_window, refine_mask, GridParams, RefineParams, TissueMask};
use cers_core::zero_shot::{bleu_n, rouge_l, tokenize};
use cers_core::{rng, Exec};
use clap::Parser;
use ndarray::{array, Array1, Array2};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, budget_s: u64) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure(t < Duration::from_secs(budget_s), format!("took {t:.1?}, budget {budget_s}s"))?;
    Ok(t)
}

fn bacc(y: &[usize], probs: &[Vec<f64>]) -> f64 {
    let pred: Vec<usize> = probs.iter().map(|p| usize::from(p[1] > p[0])).collect();
    classification_metrics(y, &pred).unwrap().balanced_accuracy
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pick(bags: &[EmbeddingBag], idx: &[usize]) -> Vec<EmbeddingBag> {
    idx.iter().map(|&i| bags[i].clone()).collect()
}

const MIL_SEED: u64 = 42;

fn mil_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 6,
        patience: 3,
        seed: MIL_SEED,
    }
}

struct MilRun {
    set: SyntheticSet,
    labels: Vec<usize>,
    test: Vec<usize>,
    train: Vec<usize>,
    model: GatedMilModel,
}

fn fit_fold0(spec: &SyntheticSpec) -> MilRun {
    let set = generate_synthetic_bags(spec).unwrap();
    let labels = set.labels();
    let split = stratified_kfold(&labels, 5, MIL_SEED).unwrap();
    let (train, val, test) = split.train_val_test(0);
    let arch = MilArch::with_input(spec.dim, 2);
    let out = train_mil(&set.bags, &labels, &train, &val, arch, &mil_config()).unwrap();
    MilRun {
        set,
        labels,
        test,
        train,
        model: out.model,
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, 0);
    for seed in 0..20 {
        let mut case = reference_mil::random_case(seed);
        let (err, _, _) = reference_mil::max_relative_error(&mut case);
        if err > worst.0 {
            worst = (err, seed);
        }
    }
    ensure(worst.0 < 1e-5, format!("relative error {:e} on seed {}", worst.0, worst.1))?;
    let t = within(start, 30)?;
    Ok(format!("worst relative error {:.2e} (seed {}), {t:.1?}", worst.0, worst.1))
}

/// Criteria 2 and 3 share one training run.
fn mil_learnability_and_localization() -> (Outcome, Outcome) {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let run = fit_fold0(&spec);
    let test_bags = pick(&run.set.bags, &run.test);
    let y_test: Vec<usize> = run.test.iter().map(|&i| run.labels[i]).collect();
    let probs = run.model.predict_proba(&test_bags, Exec::default()).unwrap();
    let held_out = bacc(&y_test, &probs);

    let k = spec.signal_instances;
    let positives: Vec<usize> = run.test.iter().copied().filter(|&i| run.labels[i] == 1).collect();
    let hits = positives
        .iter()
        .filter(|&&i| {
            let top = top_k_patches(&run.set.bags[i], &run.model, k).unwrap();
            top.iter().any(|p| run.set.signal[i].contains(&p.index))
        })
        .count();
    let hit_rate = hits as f64 / positives.len() as f64;

    // pooled out-of-fold predictions with permuted labels
    let shuffled = permute_labels(&run.labels, rng::derive_seed(MIL_SEED, 99));
    let split = stratified_kfold(&shuffled, 5, MIL_SEED).unwrap();
    let cv = cross_validate(
        &run.set.bags,
        &shuffled,
        &split,
        MilArch::with_input(spec.dim, 2),
        &mil_config(),
        Exec::default(),
    )
    .unwrap();
    let control = bacc(&shuffled, &cv.oof_probs);

    let learn = (|| {
        ensure(held_out >= 0.95, format!("held-out B-ACC {held_out:.3} < 0.95"))?;
        ensure((0.4..=0.6).contains(&control), format!("shuffled control B-ACC {control:.3} outside [0.4, 0.6]"))?;
        let t = within(start, 60)?;
        Ok(format!("held-out B-ACC {held_out:.3}, shuffled control {control:.3}, {t:.1?}"))
    })();
    let loc = if hit_rate >= 0.9 {
        Ok(format!("{hits}/{} held-out positive bags hit a signal instance in the top {k}", positives.len()))
    } else {
        Err(format!("top-{k} hit rate {hit_rate:.3} < 0.9"))
    };
    (learn, loc)
}

fn open_set_separation() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        ood_bags: 100,
        ood_shift: 6.0,
        ..SyntheticSpec::default()
    };
    let run = fit_fold0(&spec);
    let test_bags = pick(&run.set.bags, &run.test);
    let y_test: Vec<usize> = run.test.iter().map(|&i| run.labels[i]).collect();
    let control = bacc(&y_test, &run.model.predict_proba(&test_bags, Exec::default()).unwrap());

    let train_bags = pick(&run.set.bags, &run.train);
    let y_train: Vec<usize> = run.train.iter().map(|&i| run.labels[i]).collect();
    let cfg = ArplConfig {
        seed: MIL_SEED,
        ..ArplConfig::default()
    };
    let out = train_arpl_on_bags(&train_bags, &y_train, &run.model, &cfg, Exec::default()).unwrap();
    let body = out.model.as_ref().unwrap_or(&run.model);
    let score = |bags: &[EmbeddingBag]| -> Vec<(f64, usize)> {
        body.embed(bags, Exec::default())
            .unwrap()
            .iter()
            .map(|z: &Array1<f64>| {
                let s = out.head.score(z.view()).unwrap();
                (s.confidence, s.predicted())
            })
            .collect()
    };
    let known = score(&test_bags);
    let ood = score(&run.set.ood);
    let arpl_pred: Vec<usize> = known.iter().map(|s| s.1).collect();
    let arpl_bacc = classification_metrics(&y_test, &arpl_pred).unwrap().balanced_accuracy;
    let c_known: Vec<f64> = known.iter().map(|s| s.0).collect();
    let c_ood: Vec<f64> = ood.iter().map(|s| s.0).collect();
    let gap = mean(&c_known) - mean(&c_ood);
    let mut all = c_known.clone();
    all.extend(&c_ood);
    let mut is_ood = vec![false; c_known.len()];
    is_ood.extend(vec![true; c_ood.len()]);
    let t = bimodal_threshold(&all).unwrap();
    let det = detect_ood(&all, &is_ood, t).unwrap();
    let rate = det.detection_rate.unwrap_or(f64::NAN);
    let summary = format!(
        "gap {gap:.3}, threshold {t:.3}, detection rate {rate:.3}, B-ACC ARPL {arpl_bacc:.3} vs CE {control:.3}"
    );
    ensure(gap > 0.2, format!("{summary}: gap not above 0.2"))?;
    ensure(rate >= 0.9, format!("{summary}: detection rate below 0.9"))?;
    ensure((arpl_bacc - control).abs() <= 0.03, format!("{summary}: B-ACC differs by more than 0.03"))?;
    let el = within(start, 60)?;
    Ok(format!("{summary}, {el:.1?}"))
}

fn lora_exactness() -> Outcome {
    let start = Instant::now();
    let mut r = rng::from_seed(7);
    for seed in 0..20u64 {
        let (d2, d1) = (r.random_range(3..12), r.random_range(3..12));
        let w0 = Array2::from_shape_fn((d2, d1), |_| r.random::<f64>() * 2.0 - 1.0);
        let rank = r.random_range(1..d1.min(d2));
        let mut layer = LoraLayer::init(w0.clone(), &LoraConfig { rank, alpha: 8.0, dropout: 0.25 }, seed).unwrap();
        ensure(layer.merge() == w0, format!("merge at init differs from W0 (seed {seed})"))?;
        layer.u.mapv_inplace(|_| r.random::<f64>() - 0.5);
        let merged = layer.merge();
        let x = Array1::from_shape_fn(d1, |_| r.random::<f64>() * 4.0 - 2.0);
        let diff = (&layer.forward(x.view()).unwrap() - &merged.dot(&x)).mapv(f64::abs);
        let worst = diff.iter().copied().fold(0.0, f64::max);
        ensure(worst < 1e-10, format!("forward vs merged differs by {worst:e}"))?;
    }
    let hand = LoraLayer::from_parts(Array2::eye(2), array![[1.0], [0.0]], array![[0.0, 1.0]], 2.0, 0.0).unwrap();
    ensure(hand.merge() == array![[1.0, 2.0], [0.0, 1.0]], "hand case mismatch")?;
    let t = within(start, 1)?;
    Ok(format!("20 random layers and the hand case exact, {t:.1?}"))
}

fn probe_formula() -> Outcome {
    let start = Instant::now();
    for ((m, c), want) in [((1024, 2), 0.048828125), ((512, 4), 0.048828125), ((384, 28), 100.0 / 10752.0)] {
        let got = ProbeConfig::new(m, c).lambda();
        ensure(got == want, format!("lambda({m}, {c}) = {got}, expected {want}"))?;
    }
    let capped = ProbeConfig {
        max_epochs: 500,
        ..ProbeConfig::new(4, 2)
    };
    ensure(capped.epochs() == MAX_PROBE_EPOCHS && MAX_PROBE_EPOCHS == 80, "epoch cap not 80")?;

    let mut r = rng::from_seed(3);
    let n = 400;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Array2::from_shape_fn((n, 8), |(i, j)| {
        let s = if labels[i] == 1 { 1.0 } else { -1.0 };
        (if j == 0 { 2.0 * s } else { 0.0 }) + r.random::<f64>() - 0.5
    });
    let cfg = ProbeConfig {
        learning_rate: 1e-2,
        max_epochs: 500,
        ..ProbeConfig::new(8, 2)
    };
    let out = train_linear_probe(x.view(), &labels, None, &cfg).unwrap();
    ensure(out.history.len() <= 80, format!("ran {} epochs", out.history.len()))?;
    let acc = out.classifier.accuracy(x.view(), &labels);
    ensure(acc >= 0.99, format!("separable accuracy {acc:.3}"))?;
    let t = within(start, 30)?;
    Ok(format!("lambda cases exact, {} epochs, separable accuracy {acc:.3}, {t:.1?}", out.history.len()))
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng::from_seed(11);
    let mut cases = 0;
    while cases < 500 {
        let n = r.random_range(2..=100);
        let levels = r.random_range(2..40);
        let s: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels)) / levels as f64).collect();
        let y: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
        if !(y.contains(&true) && y.contains(&false)) {
            continue;
        }
        let (a, o) = (roc_auc(&s, &y).unwrap(), oracles::pairwise_auc(&s, &y));
        ensure(a == o, format!("AUC {a} vs enumeration {o} (n = {n})"))?;
        cases += 1;
    }

    let mut t = vec![0; 10];
    t.extend([1; 5]);
    let mut p = vec![0; 9];
    p.extend([1, 1, 1, 0, 0, 1]);
    let b = classification_metrics(&t, &p).unwrap().balanced_accuracy;
    ensure((b - 0.75).abs() < 1e-15, format!("hand B-ACC {b}"))?;

    for (seed, k) in [(1u64, 2usize), (2, 3), (3, 4)] {
        let mut rr = rng::from_seed(seed);
        let labels: Vec<usize> = (0..50).map(|i| i % k).collect();
        let x = Array2::from_shape_fn((50, 3), |(i, j)| {
            labels[i] as f64 * if j == 0 { 1.5 } else { 0.5 } + rr.random::<f64>() * 2.0 - 1.0
        });
        let st = cluster_stats(x.view(), &labels, Exec::default()).unwrap();
        let sil = oracles::silhouette(&x.view(), &labels);
        let dbi = oracles::davies_bouldin(&x.view(), &labels);
        ensure((st.silhouette - sil).abs() < 1e-9, format!("silhouette {} vs {sil}", st.silhouette))?;
        ensure((st.davies_bouldin - dbi).abs() < 1e-9, format!("DBI {} vs {dbi}", st.davies_bouldin))?;
    }

    for _ in 0..200 {
        let a: Vec<f64> = (0..r.random_range(1..30)).map(|_| r.random::<f64>() * 100.0 - 50.0).collect();
        let b: Vec<f64> = (0..r.random_range(1..30)).map(|_| r.random::<f64>() * 100.0 - 50.0).collect();
        let (w, o) = (wasserstein_1d(&a, &b).unwrap(), oracles::wasserstein_sorted(&a, &b));
        ensure((w - o).abs() < 1e-12 * o.max(1.0), format!("W1 {w} vs sorted oracle {o}"))?;
    }
    let el = within(start, 10)?;
    Ok(format!("500 AUC cases exact, B-ACC 0.75, silhouette/DBI and W1 within tolerance, {el:.1?}"))
}

fn calibration() -> Outcome {
    let start = Instant::now();
    let s = [0.9, 0.7, 0.6, 0.3, 0.2, 0.8, 0.5, 0.1];
    let y = [true, true, true, true, true, false, false, false];
    let t = calibrate_threshold(&s, &y, 0.8).unwrap();
    ensure(t == 0.3, format!("enumerated example gave {t}"))?;
    let mut r = rng::from_seed(8);
    let mut sets = 0;
    while sets < 500 {
        let n = r.random_range(2..80);
        let s: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..25u8)) / 25.0).collect();
        let y: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
        if !y.contains(&true) {
            continue;
        }
        let t = calibrate_threshold(&s, &y, 0.8).unwrap();
        let sens = sensitivity_at(&s, &y, t);
        ensure(sens >= 0.8, format!("sensitivity {sens} below target at {t}"))?;
        sets += 1;
    }
    let el = within(start, 10)?;
    Ok(format!("t = 0.3 on the enumerated example, 500 random sets meet the target, {el:.1?}"))
}

fn text_metrics() -> Outcome {
    let start = Instant::now();
    let rl = rouge_l(&tokenize("the cat sat"), &tokenize("the cat ate"));
    ensure((rl - 2.0 / 3.0).abs() < 1e-12, format!("ROUGE-L {rl}"))?;
    let b1 = bleu_n(&[tokenize("a b c d")], &[tokenize("a b c e")], 1).unwrap();
    ensure((b1 - 0.75).abs() < 1e-12, format!("BLEU-1 {b1}"))?;
    let same = tokenize("atypical glandular cells present in the sample");
    ensure(rouge_l(&same, &same) == 1.0, "identical ROUGE-L")?;
    for n in [1, 3, 5] {
        let b = bleu_n(&[same.clone()], &[same.clone()], n).unwrap();
        ensure(b == 1.0, format!("identical BLEU-{n} = {b}"))?;
    }
    let other = tokenize("no lesion seen");
    ensure(rouge_l(&same, &other) == 0.0, "disjoint ROUGE-L")?;
    ensure(bleu_n(&[same.clone()], &[other], 1).unwrap() == 0.0, "disjoint BLEU-1")?;
    let t = within(start, 1)?;
    Ok(format!("ROUGE-L {rl:.4}, BLEU-1 {b1}, identity 1 and disjoint 0, {t:.1?}"))
}

fn tiling() -> Outcome {
    let start = Instant::now();
    let params = GridParams::default();
    let grid = extract_patch_grid(&TissueMask::full(64, 64), &params).unwrap();
    ensure(grid.len() == 16, format!("full 64 x 64 mask gave {} patches", grid.len()))?;

    let s = params.scale_factor();
    let p = params.patch_px;
    let mut r = rng::from_seed(10);
    for _ in 0..100 {
        let (w, h) = (r.random_range(16..80), r.random_range(16..80));
        let density = r.random::<f64>();
        let bits: Vec<bool> = (0..w * h).map(|_| r.random::<f64>() < density).collect();
        let mask = TissueMask::from_bits(w, h, bits).unwrap();
        let grid = extract_patch_grid(&mask, &params).unwrap();
        let (nx, ny) = ((w as f64 * s) as u32 / p, (h as f64 * s) as u32 / p);
        let mut expected = 0;
        for j in 0..ny {
            for i in 0..nx {
                let (x0, y0, x1, y1) = patch_window(&mask, i * p, j * p, p, s);
                let count = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).filter(|&(x, y)| mask.get(x, y)).count();
                let frac = count as f64 / ((x1 - x0) * (y1 - y0)) as f64;
                expected += usize::from(count > 0 && frac >= params.min_tissue_frac);
            }
        }
        ensure(grid.len() == expected, format!("{} patches, oracle {expected}", grid.len()))?;
        for (k, &(x, y)) in grid.coords.iter().enumerate() {
            ensure(x % p == 0 && y % p == 0, "patch off the grid")?;
            ensure(x + p <= (w as f64 * s) as u32 && y + p <= (h as f64 * s) as u32, "patch outside slide")?;
            ensure(grid.coords[..k].iter().all(|&(a, b)| a.abs_diff(x) >= p || b.abs_diff(y) >= p), "overlapping patches")?;
            let f = grid.tissue_frac[k];
            ensure(f >= params.min_tissue_frac && f <= 1.0, format!("tissue fraction {f}"))?;
        }
    }

    let gap = TissueMask::from_fn(80, 60, |x, y| (20..40).contains(&y) && ((10..30).contains(&x) || (32..52).contains(&x)));
    let closed = refine_mask(&gap, &RefineParams::default(), Exec::default());
    let parts = oracles::count_components(80, 60, closed.bits());
    ensure(parts == 1, format!("gap closing left {parts} components"))?;
    let t = within(start, 20)?;
    Ok(format!("4 x 4 grid, 100 random masks match the oracle, gap closes to one component, {t:.1?}"))
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn format_and_determinism() -> Outcome {
    let start = Instant::now();
    let mut r = rng::from_seed(12);
    for i in 0..1000 {
        let (n, d) = (r.random_range(1..20), r.random_range(1..12));
        let x = Array2::from_shape_fn((n, d), |_| (r.random::<f64>() * 2e3 - 1e3) as f32);
        let coords = (0..n).map(|_| (r.random::<i32>(), r.random::<i32>())).collect();
        let label = r.random::<bool>().then(|| r.random_range(0..5));
        let bag = EmbeddingBag::new(format!("slide_{i}"), x, coords, label).unwrap();
        let bytes = bag.to_bytes().unwrap();
        let back = EmbeddingBag::from_bytes(&bytes).unwrap();
        ensure(back == bag && back.to_bytes().unwrap() == bytes, format!("round trip failed for bag {i}"))?;
    }

    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{
      "seed": 5,
      "synth": {"bags_per_class": 30, "instances_per_bag": 20, "dim": 8, "ood_bags": 20},
      "mil": {"learning_rate": 0.001, "max_epochs": 12, "patience": 4},
      "arpl": {"epochs": 15, "n_bootstrap": 200},
      "eval": {"n_bootstrap": 200}
    }"#;
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg).unwrap();
    let thumb = tmp.path().join("thumb.ppm");
    let mut ppm = b"P6\n48 40\n255\n".to_vec();
    for y in 0..40 {
        for x in 0..48 {
            let tissue = (x as f64 - 24.0).powi(2) / 300.0 + (y as f64 - 20.0).powi(2) / 150.0 <= 1.0;
            ppm.extend(if tissue { [205, 125, 170] } else { [245, 245, 245] });
        }
    }
    std::fs::write(&thumb, ppm).unwrap();
    let mut runs = Vec::new();
    for rep in 0..2 {
        let out = tmp.path().join(format!("run{rep}"));
        std::fs::create_dir(&out).unwrap();
        let c = cfg_path.to_str().unwrap();
        let o = |name: &str| out.join(name).to_str().unwrap().to_string();
        for args in [
            vec!["cers", "--config", c, "run", "--out", &o("pipeline")],
            vec!["cers", "--config", c, "tile", "--thumb", thumb.to_str().unwrap(), "--sample-count", "5", "--out", &o("grid.csv")],
        ] {
            cers_cli::run(&Cli::parse_from(args)).map_err(|e| e.to_string())?;
        }
        runs.push(tree(&out));
    }
    ensure(runs[0].len() > 20, format!("only {} artifacts", runs[0].len()))?;
    for (a, b) in runs[0].iter().zip(&runs[1]) {
        ensure(a == b, format!("{} differs between reruns", a.0.display()))?;
    }
    ensure(runs[0].len() == runs[1].len(), "artifact sets differ")?;
    let t = within(start, 20)?;
    Ok(format!("1000 CEB1 round trips, {} artifacts byte-identical across reruns, {t:.1?}", runs[0].len()))
}

fn few_shot_protocol() -> Outcome {
    let start = Instant::now();
    let mut r = rng::from_seed(13);
    for case in 0..500u64 {
        let n = r.random_range(10..120);
        let c = r.random_range(2..5);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let split = stratified_kfold(&labels, 5, case).unwrap();
        ensure(split.folds.len() == n && split.folds.iter().all(|&f| f < 5), "fold ids")?;
        for class in 0..c {
            let per: Vec<usize> = (0..5)
                .map(|f| (0..n).filter(|&i| labels[i] == class && split.folds[i] == f).count())
                .collect();
            let (lo, hi) = (per.iter().min().unwrap(), per.iter().max().unwrap());
            ensure(hi - lo <= 1, format!("class {class} fold sizes {per:?}"))?;
        }
        ensure(stratified_kfold(&labels, 5, case).unwrap() == split, "split not deterministic")?;
        let k = r.random_range(1..6);
        let counts: Vec<usize> = (0..c).map(|cl| labels.iter().filter(|&&l| l == cl).count()).collect();
        match few_shot_sample(&labels, k, case) {
            Ok(idx) => {
                for cl in 0..c {
                    let got = idx.iter().filter(|&&i| labels[i] == cl).count();
                    let want = if counts[cl] > 0 { k } else { 0 };
                    ensure(got == want, format!("class {cl}: {got} sampled, expected {want}"))?;
                }
                let mut d = idx.clone();
                d.sort_unstable();
                d.dedup();
                ensure(d.len() == idx.len(), "duplicate sample")?;
            }
            Err(_) => ensure(counts.iter().any(|&m| m > 0 && m < k), "few-shot refused a feasible request")?,
        }
    }
    let t = within(start, 5)?;
    Ok(format!("500 label vectors, {t:.1?}"))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => Err(format!(
            "panicked: {}",
            e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

fn main() {
    let (c2, c3) = match panic::catch_unwind(mil_learnability_and_localization) {
        Ok(pair) => pair,
        Err(_) => (Err("panicked".into()), Err("panicked".into())),
    };
    let mut results = vec![
        ("1 gradient fidelity", guarded(gradient_fidelity)),
        ("2 MIL learnability", c2),
        ("3 attention localization", c3),
    ];
    let rest: [(&str, fn() -> Outcome); 9] = [
        ("4 open-set separation", open_set_separation),
        ("5 LoRA exactness", lora_exactness),
        ("6 probe formula", probe_formula),
        ("7 metric oracles", metric_oracles),
        ("8 calibration", calibration),
        ("9 text metrics", text_metrics),
        ("10 tiling", tiling),
        ("11 format and determinism", format_and_determinism),
        ("12 few-shot and CV protocol", few_shot_protocol),
    ];
    for (name, f) in rest {
        results.push((name, guarded(f)));
    }
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(msg) => println!("PASS criterion {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
