//! Classification metrics, bootstrap intervals, threshold calibration and
//! embedding-space cluster statistics.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::DimensionMismatch {
                expected: y_true.len(),
                found: y_pred.len(),
            });
        }
        let mut counts = vec![vec![0u64; n_classes]; n_classes];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::invalid(format!("class index out of range for {n_classes} classes")));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// `None` when the class never occurs in the ground truth.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let s = self.support(class);
        (s > 0).then(|| self.counts[class][class] as f64 / s as f64)
    }

    /// `None` when the class is never predicted.
    pub fn precision(&self, class: usize) -> Option<f64> {
        let s = self.predicted(class);
        (s > 0).then(|| self.counts[class][class] as f64 / s as f64)
    }

    pub fn balanced_accuracy(&self) -> f64 {
        let recalls: Vec<f64> = (0..self.n_classes()).filter_map(|c| self.recall(c)).collect();
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    /// Recall of class 1; binary problems only.
    pub sensitivity: Option<f64>,
    /// Recall of class 0; binary problems only.
    pub specificity: Option<f64>,
    /// Class-1 precision for binary problems, macro average otherwise.
    pub precision: f64,
    /// Binary F1 of class 1 for two classes, macro F1 otherwise.
    pub f1: f64,
    pub confusion: ConfusionMatrix,
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Classes absent from `y_true` have undefined recall and are left out of
/// the balanced accuracy and macro averages (with a warning). Undefined
/// precision counts as zero.
pub fn classification_metrics(y_true: &[usize], y_pred: &[usize]) -> Result<ClassificationMetrics> {
    if y_true.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let n_classes = y_true.iter().chain(y_pred).max().map_or(2, |&m| (m + 1).max(2));
    let cm = ConfusionMatrix::from_predictions(y_true, y_pred, n_classes)?;
    let per_class_recall: Vec<Option<f64>> = (0..n_classes).map(|c| cm.recall(c)).collect();
    let present: Vec<usize> = (0..n_classes).filter(|&c| cm.support(c) > 0).collect();
    if present.len() < n_classes {
        log::warn!(
            "classes {:?} absent from ground truth; excluded from balanced accuracy",
            (0..n_classes).filter(|c| !present.contains(c)).collect::<Vec<_>>()
        );
    }
    let correct: u64 = (0..n_classes).map(|c| cm.counts[c][c]).sum();
    let accuracy = correct as f64 / cm.total() as f64;
    let balanced_accuracy = cm.balanced_accuracy();
    let (sensitivity, specificity, precision, f1) = if n_classes == 2 {
        let p = cm.precision(1).unwrap_or(0.0);
        let r = cm.recall(1);
        (r, cm.recall(0), p, f1_of(p, r.unwrap_or(0.0)))
    } else {
        let m = present.len() as f64;
        let p: f64 = present.iter().map(|&c| cm.precision(c).unwrap_or(0.0)).sum::<f64>() / m;
        let f: f64 = present
            .iter()
            .map(|&c| f1_of(cm.precision(c).unwrap_or(0.0), cm.recall(c).unwrap_or(0.0)))
            .sum::<f64>()
            / m;
        (None, None, p, f)
    };
    Ok(ClassificationMetrics {
        balanced_accuracy,
        accuracy,
        per_class_recall,
        sensitivity,
        specificity,
        precision,
        f1,
        confusion: cm,
    })
}

/// Area under the ROC curve through the rank-sum identity, with tied scores
/// receiving average ranks (a tie counts one half).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: positive.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied ranks integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum2 += avg2;
            }
        }
        i = j + 1;
    }
    let u2 = rank_sum2 - (n_pos * (n_pos + 1)) as u64;
    Ok(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_boot: 1000,
            seed: 0,
            level: 0.95,
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile interval of a statistic over `n_boot` replicates. Replicate
/// `b` draws from its own stream derived from the master seed, so the result
/// does not depend on scheduling. Non-finite replicates are dropped.
pub fn bootstrap_replicates<F>(cfg: &BootstrapConfig, exec: Exec, replicate: F) -> Result<Interval>
where
    F: Fn(&mut rng::Rng) -> f64 + Sync + Send,
{
    if cfg.n_boot == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::invalid("bootstrap needs n_boot >= 1 and level in (0, 1)"));
    }
    let stats = exec.map_range(cfg.n_boot, |b| replicate(&mut rng::stream(cfg.seed, b as u64)));
    let mut finite: Vec<f64> = stats.into_iter().filter(|v| v.is_finite()).collect();
    if finite.len() < cfg.n_boot {
        log::warn!("dropped {} non-finite bootstrap replicates", cfg.n_boot - finite.len());
    }
    if finite.is_empty() {
        return Err(Error::NonFinite("every bootstrap replicate".into()));
    }
    finite.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok(Interval {
        low: quantile_sorted(&finite, tail),
        high: quantile_sorted(&finite, 1.0 - tail),
    })
}

/// Resample indices `0..n` with replacement.
pub fn resample_indices(rng: &mut rng::Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Percentile bootstrap of `stat` over `samples` resampled with replacement.
pub fn bootstrap_ci<T, F>(samples: &[T], stat: F, cfg: &BootstrapConfig, exec: Exec) -> Result<Interval>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> f64 + Sync + Send,
{
    if samples.len() < 2 {
        return Err(Error::invalid("bootstrap needs at least two samples"));
    }
    bootstrap_replicates(cfg, exec, |rng| {
        let draw: Vec<T> = resample_indices(rng, samples.len())
            .into_iter()
            .map(|i| samples[i].clone())
            .collect();
        stat(&draw)
    })
}

const LOGIT_CLAMP: f64 = 1e-6;

fn logit(p: f64) -> f64 {
    let q = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
    if q != p {
        log::warn!("probability {p} clamped to {q} for log-odds");
    }
    (q / (1.0 - q)).ln()
}

/// Natural-log odds of `p_model` minus that of `p_base`.
pub fn log_odds_gain(p_model: f64, p_base: f64) -> f64 {
    logit(p_model) - logit(p_base)
}

/// Largest observed score `t` such that predicting positive for
/// `score >= t` keeps sensitivity at or above `target`.
pub fn calibrate_threshold(scores: &[f64], positive: &[bool], target: f64) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: positive.len(),
        });
    }
    if !(target <= 1.0) {
        return Err(Error::invalid(format!("target sensitivity {target} above 1")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration score".into()));
    }
    let mut pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    if pos.is_empty() {
        return Err(Error::NoPositives);
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let mut candidates = scores.to_vec();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    let n = pos.len() as f64;
    let mut captured = 0usize;
    for t in candidates {
        while captured < pos.len() && pos[captured] >= t {
            captured += 1;
        }
        if captured as f64 / n >= target {
            return Ok(t);
        }
    }
    unreachable!("the smallest score captures every positive")
}

/// Fraction of positives with `score >= t`.
pub fn sensitivity_at(scores: &[f64], positive: &[bool], t: f64) -> f64 {
    let (hit, n) = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .fold((0usize, 0usize), |(h, n), (&s, _)| (h + usize::from(s >= t), n + 1));
    hit as f64 / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub class_a: usize,
    pub class_b: usize,
    /// `1 - cos` between the two centroids; NaN if either centroid is zero.
    pub cosine_distance: f64,
    /// Wasserstein-1 between the classes projected on the unit axis joining
    /// their centroids; NaN if the centroids coincide.
    pub wasserstein: f64,
    pub symmetric_kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub pairs: Vec<PairStats>,
    /// Classes dropped for having fewer than two points.
    pub excluded: Vec<usize>,
}

pub const KL_VARIANCE_FLOOR: f64 = 1e-6;

fn euclid(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Wasserstein-1 between two 1-D empirical distributions, integrating the
/// absolute CDF difference.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Wasserstein distance of an empty sample"));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut x = xa[0].min(xb[0]);
    let mut total = 0.0;
    while i < xa.len() || j < xb.len() {
        let next = match (xa.get(i), xb.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < xa.len() && xa[i] == x {
            i += 1;
        }
        while j < xb.len() && xb[j] == x {
            j += 1;
        }
    }
    Ok(total)
}

fn diag_gaussian(rows: &ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = rows.mean_axis(Axis(0)).unwrap();
    let var = rows
        .var_axis(Axis(0), 0.0)
        .mapv(|v| v.max(KL_VARIANCE_FLOOR));
    (mean, var)
}

fn kl_diag(m1: &Array1<f64>, v1: &Array1<f64>, m2: &Array1<f64>, v2: &Array1<f64>) -> f64 {
    let mut s = 0.0;
    for k in 0..m1.len() {
        let d = m1[k] - m2[k];
        s += (v2[k] / v1[k]).ln() + (v1[k] + d * d) / v2[k] - 1.0;
    }
    0.5 * s
}

/// Silhouette, Davies-Bouldin and pairwise class statistics for `x` (one
/// row per point). Classes with fewer than two points are excluded.
pub fn cluster_stats(x: ArrayView2<f64>, labels: &[usize], exec: Exec) -> Result<ClusterStats> {
    if x.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: labels.len(),
        });
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let excluded: Vec<usize> = members.iter().filter(|(_, m)| m.len() < 2).map(|(&c, _)| c).collect();
    if !excluded.is_empty() {
        log::warn!("classes {excluded:?} have fewer than two points and are excluded");
    }
    members.retain(|_, m| m.len() >= 2);
    if members.len() < 2 {
        return Err(Error::invalid("cluster statistics need two classes with at least two points"));
    }
    let classes: Vec<usize> = members.keys().copied().collect();
    let groups: Vec<&Vec<usize>> = members.values().collect();
    let points: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, m)| m.iter().map(move |&i| (g, i)))
        .collect();

    let sil = exec.map(&points, |&(g, i)| {
        let mean_to = |m: &Vec<usize>, skip_self: bool| {
            let s: f64 = m.iter().filter(|&&j| j != i).map(|&j| euclid(x.row(i), x.row(j))).sum();
            s / (m.len() - usize::from(skip_self)) as f64
        };
        let a = mean_to(groups[g], true);
        let b = groups
            .iter()
            .enumerate()
            .filter(|&(h, _)| h != g)
            .map(|(_, m)| mean_to(m, false))
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom == 0.0 {
            0.0
        } else {
            (b - a) / denom
        }
    });
    let silhouette = sil.iter().sum::<f64>() / sil.len() as f64;

    let rows_of = |m: &Vec<usize>| x.select(Axis(0), m);
    let centroids: Vec<Array1<f64>> = groups.iter().map(|m| rows_of(m).mean_axis(Axis(0)).unwrap()).collect();
    let scatter: Vec<f64> = groups
        .iter()
        .zip(&centroids)
        .map(|(m, c)| m.iter().map(|&i| euclid(x.row(i), c.view())).sum::<f64>() / m.len() as f64)
        .collect();
    let k = groups.len();
    let mut dbi = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let r = (scatter[i] + scatter[j]) / euclid(centroids[i].view(), centroids[j].view());
            worst = worst.max(r);
        }
        dbi += worst;
    }
    let davies_bouldin = dbi / k as f64;

    let fits: Vec<_> = groups.iter().map(|m| diag_gaussian(&rows_of(m).view())).collect();
    let mut pairs = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let (ca, cb) = (&centroids[a], &centroids[b]);
            let (na, nb) = (ca.dot(ca).sqrt(), cb.dot(cb).sqrt());
            let cosine_distance = if na == 0.0 || nb == 0.0 {
                f64::NAN
            } else {
                1.0 - ca.dot(cb) / (na * nb)
            };
            let diff = cb - ca;
            let len = diff.dot(&diff).sqrt();
            let wasserstein = if len == 0.0 {
                f64::NAN
            } else {
                let axis = diff / len;
                let pa: Vec<f64> = groups[a].iter().map(|&i| x.row(i).dot(&axis)).collect();
                let pb: Vec<f64> = groups[b].iter().map(|&i| x.row(i).dot(&axis)).collect();
                wasserstein_1d(&pa, &pb)?
            };
            let (ma, va) = &fits[a];
            let (mb, vb) = &fits[b];
            pairs.push(PairStats {
                class_a: classes[a],
                class_b: classes[b],
                cosine_distance,
                wasserstein,
                symmetric_kl: kl_diag(ma, va, mb, vb) + kl_diag(mb, vb, ma, va),
            });
        }
    }
    Ok(ClusterStats {
        silhouette,
        davies_bouldin,
        pairs,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
}

impl MetricValue {
    pub fn point(value: f64) -> Self {
        MetricValue {
            value,
            ci_low: None,
            ci_high: None,
        }
    }

    pub fn with_ci(value: f64, ci: Interval) -> Self {
        MetricValue {
            value,
            ci_low: Some(ci.low),
            ci_high: Some(ci.high),
        }
    }
}

/// Metric table with provenance. Metrics serialize as top-level keys next to
/// `seed`, `n_bootstrap` and `config_hash`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: BTreeMap<String, MetricValue>,
    pub seed: u64,
    pub n_bootstrap: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(seed: u64, n_bootstrap: usize, config_hash: impl Into<String>) -> Self {
        EvalReport {
            metrics: BTreeMap::new(),
            seed,
            n_bootstrap,
            config_hash: config_hash.into(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: MetricValue) {
        self.metrics.insert(name.into(), value);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `metric,value,ci_low,ci_high`, one row per metric; missing bounds are
    /// left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("metric,value,ci_low,ci_high\n");
        for (name, m) in &self.metrics {
            out.push_str(&format!("{name},{},{},{}\n", m.value, opt(m.ci_low), opt(m.ci_high)));
        }
        out
    }
}
