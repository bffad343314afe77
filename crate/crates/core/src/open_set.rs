//! Reciprocal-point open-set head, confidence scoring and OOD thresholds.
//!
//! For an embedding `z` and reciprocal points `P_k`:
//!
//! ```text
//! d_e(z, P_k) = |z - P_k|^2 / d
//! s_k         = d_e(z, P_k) - z . P_k
//! probs       = softmax(gamma * s)
//! loss        = CE(probs, y) + lambda_o * (d_e(z, P_y) - R)^2
//! ```
//!
//! Confidence is the largest probability. Known-class embeddings end up far
//! from every reciprocal point except along the direction that identifies
//! their class; unfamiliar inputs get flatter probabilities.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bags::EmbeddingBag;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{self, BootstrapConfig, Interval};
use crate::mil::{self, DropoutMasks, GatedMilModel, MilParams, Mode};
use crate::optim::Adam;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReciprocalPointHead {
    /// K x d, one reciprocal point per known class.
    pub points: Array2<f64>,
    pub radius: f64,
    pub gamma: f64,
    pub lambda_o: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArplScore {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub confidence: f64,
}

impl ArplScore {
    pub fn predicted(&self) -> usize {
        mil::argmax(&self.scores)
    }
}

impl ReciprocalPointHead {
    pub fn new(points: Array2<f64>, radius: f64, gamma: f64, lambda_o: f64) -> Result<Self> {
        let head = ReciprocalPointHead {
            points,
            radius,
            gamma,
            lambda_o,
        };
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes() < 2 || self.dim() == 0 {
            return Err(Error::invalid("reciprocal-point head needs K >= 2 points of positive dimension"));
        }
        if !(self.radius >= 0.0) || !(self.gamma > 0.0) || !(self.lambda_o >= 0.0) {
            return Err(Error::invalid("head needs R >= 0, gamma > 0, lambda_o >= 0"));
        }
        if self.points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reciprocal point".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    fn check(&self, z: &ArrayView1<f64>) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: z.len(),
            });
        }
        Ok(())
    }

    fn sq_dist(&self, z: &ArrayView1<f64>, k: usize) -> f64 {
        let p = self.points.row(k);
        z.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / self.dim() as f64
    }

    fn raw_scores(&self, z: &ArrayView1<f64>) -> Vec<f64> {
        (0..self.n_classes())
            .map(|k| self.sq_dist(z, k) - z.dot(&self.points.row(k)))
            .collect()
    }

    pub fn score(&self, z: ArrayView1<f64>) -> Result<ArplScore> {
        self.check(&z)?;
        let scores = self.raw_scores(&z);
        let scaled: Vec<f64> = scores.iter().map(|s| self.gamma * s).collect();
        let probs = mil::softmax(&scaled);
        let confidence = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(ArplScore {
            scores,
            probs,
            confidence,
        })
    }

    pub fn loss(&self, z: ArrayView1<f64>, label: usize) -> Result<f64> {
        Ok(self.loss_and_grad(z, label)?.0)
    }

    /// Loss with gradients for the points, the radius and the embedding.
    pub fn loss_and_grad(&self, z: ArrayView1<f64>, label: usize) -> Result<(f64, HeadGrad, Array1<f64>)> {
        self.check(&z)?;
        if label >= self.n_classes() {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                self.n_classes()
            )));
        }
        let d = self.dim() as f64;
        let sc = self.score(z)?;
        let margin = self.sq_dist(&z, label) - self.radius;
        let scaled: Vec<f64> = sc.scores.iter().map(|s| self.gamma * s).collect();
        let loss = mil::cross_entropy(&scaled, label) + self.lambda_o * margin * margin;

        let mut dp = Array2::zeros(self.points.raw_dim());
        let mut dz = Array1::zeros(self.dim());
        for k in 0..self.n_classes() {
            let ds = self.gamma * (sc.probs[k] - f64::from(u8::from(k == label)));
            let p = self.points.row(k);
            // ds_k/dP_k = -2(z - P_k)/d - z ; ds_k/dz = 2(z - P_k)/d - P_k
            for j in 0..self.dim() {
                let diff = z[j] - p[j];
                dp[[k, j]] += ds * (-2.0 * diff / d - z[j]);
                dz[j] += ds * (2.0 * diff / d - p[j]);
            }
        }
        let dm = 2.0 * self.lambda_o * margin;
        let p = self.points.row(label).to_owned();
        for j in 0..self.dim() {
            let diff = z[j] - p[j];
            dp[[label, j]] -= dm * 2.0 * diff / d;
            dz[j] += dm * 2.0 * diff / d;
        }
        Ok((loss, HeadGrad { points: dp, radius: -dm }, dz))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub points: Array2<f64>,
    pub radius: f64,
}

pub fn arpl_score(z: ArrayView1<f64>, head: &ReciprocalPointHead) -> Result<ArplScore> {
    head.score(z)
}

pub fn arpl_loss(z: ArrayView1<f64>, label: usize, head: &ReciprocalPointHead) -> Result<f64> {
    head.loss(z, label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArplConfig {
    pub gamma: f64,
    pub lambda_o: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Also update the MIL attention body when training from bags.
    pub joint: bool,
    pub body_learning_rate: f64,
}

impl Default for ArplConfig {
    fn default() -> Self {
        ArplConfig {
            gamma: 1.0,
            lambda_o: 0.1,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            seed: 42,
            joint: false,
            body_learning_rate: 1e-4,
        }
    }
}

impl ArplConfig {
    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.lambda_o >= 0.0) {
            return Err(Error::invalid("ARPL needs gamma > 0 and lambda_o >= 0"));
        }
        if !(self.learning_rate > 0.0) || !(self.body_learning_rate > 0.0) {
            return Err(Error::invalid("ARPL learning rates must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("ARPL needs at least one epoch and a positive batch size"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ArplOutcome {
    pub head: ReciprocalPointHead,
    /// Jointly tuned MIL body, when `joint` was set.
    pub model: Option<GatedMilModel>,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
    /// Balanced accuracy of `argmax s_k` on the training embeddings.
    pub closed_set_bacc: f64,
}

fn check_labels(labels: &[usize]) -> Result<usize> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = (0..k).filter(|c| labels.contains(c)).count();
    if distinct < 2 {
        return Err(Error::SingleClass);
    }
    Ok(k)
}

fn init_head(k: usize, d: usize, cfg: &ArplConfig, rng: &mut rng::Rng) -> ReciprocalPointHead {
    let points = Array2::from_shape_fn((k, d), |_| {
        0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    });
    ReciprocalPointHead {
        points,
        radius: 0.0,
        gamma: cfg.gamma,
        lambda_o: cfg.lambda_o,
    }
}

fn batches(n: usize, cfg: &ArplConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, 1 + epoch as u64));
    order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

fn mean_radius(head: &ReciprocalPointHead, zs: &[Array1<f64>], labels: &[usize], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| head.sq_dist(&zs[i].view(), labels[i])).sum::<f64>() / idx.len() as f64
}

fn head_step(opt: &mut Adam, head: &mut ReciprocalPointHead, g: &HeadGrad) {
    let mut r = [head.radius];
    opt.step(
        vec![head.points.as_slice_mut().unwrap(), &mut r],
        vec![g.points.as_slice().unwrap(), &[g.radius]],
    );
    head.radius = r[0].max(0.0);
}

fn closed_set_bacc(head: &ReciprocalPointHead, zs: &[Array1<f64>], labels: &[usize]) -> Result<f64> {
    let pred = zs
        .iter()
        .map(|z| head.score(z.view()).map(|s| s.predicted()))
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics::classification_metrics(labels, &pred)?.balanced_accuracy)
}

/// Trains the head on fixed embeddings with minibatch Adam. The radius
/// starts at the mean `d_e(z, P_y)` of the first batch.
pub fn train_arpl(features: &[Array1<f64>], labels: &[usize], cfg: &ArplConfig) -> Result<ArplOutcome> {
    cfg.validate()?;
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::invalid("one label per embedding required"));
    }
    let k = check_labels(labels)?;
    let d = features[0].len();
    if let Some(z) = features.iter().find(|z| z.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: z.len(),
        });
    }
    let mut head = init_head(k, d, cfg, &mut rng::stream(cfg.seed, 0));
    let mut opt = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (b, batch) in batches(features.len(), cfg, epoch).into_iter().enumerate() {
            if epoch == 0 && b == 0 {
                head.radius = mean_radius(&head, features, labels, &batch);
            }
            let mut g = HeadGrad {
                points: Array2::zeros(head.points.raw_dim()),
                radius: 0.0,
            };
            for &i in &batch {
                let (loss, gi, _) = head.loss_and_grad(features[i].view(), labels[i])?;
                total += loss;
                g.points += &gi.points;
                g.radius += gi.radius;
            }
            let scale = 1.0 / batch.len() as f64;
            g.points *= scale;
            g.radius *= scale;
            head_step(&mut opt, &mut head, &g);
        }
        let mean = total / features.len() as f64;
        if !mean.is_finite() || !head.points.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("ARPL loss at epoch {epoch}")));
        }
        history.push(mean);
    }
    let closed_set_bacc = closed_set_bacc(&head, features, labels)?;
    Ok(ArplOutcome {
        head,
        model: None,
        history,
        closed_set_bacc,
    })
}

/// Trains the head on pooled embeddings of `model`. With `cfg.joint` the
/// attention body is updated through the ARPL loss as well (dropout masks
/// are drawn per bag); otherwise the body is frozen and embeddings are
/// computed once.
pub fn train_arpl_on_bags(
    bags: &[EmbeddingBag],
    labels: &[usize],
    model: &GatedMilModel,
    cfg: &ArplConfig,
    exec: Exec,
) -> Result<ArplOutcome> {
    if !cfg.joint {
        let zs = model.embed(bags, exec)?;
        return train_arpl(&zs, labels, cfg);
    }
    cfg.validate()?;
    if bags.len() != labels.len() || bags.is_empty() {
        return Err(Error::invalid("one label per bag required"));
    }
    let k = check_labels(labels)?;
    let mut model = model.clone();
    let xs: Vec<Array2<f64>> = bags.iter().map(EmbeddingBag::instances_f64).collect();
    let d = model.arch.latent_dim;
    let mut head = init_head(k, d, cfg, &mut rng::stream(cfg.seed, 0));
    let mut head_opt = Adam::new(cfg.learning_rate);
    let mut body_opt = Adam::new(cfg.body_learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut mask_rng = rng::stream(cfg.seed, 1_000_000 + epoch as u64);
        for (b, batch) in batches(bags.len(), cfg, epoch).into_iter().enumerate() {
            if epoch == 0 && b == 0 {
                let zs: Vec<Array1<f64>> = batch
                    .iter()
                    .map(|&i| model.forward_matrix(xs[i].view(), Mode::Eval).map(|o| o.embedding()))
                    .collect::<Result<_>>()?;
                let local: Vec<usize> = (0..batch.len()).collect();
                let ls: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                head.radius = mean_radius(&head, &zs, &ls, &local);
            }
            let mut g = HeadGrad {
                points: Array2::zeros(head.points.raw_dim()),
                radius: 0.0,
            };
            let mut body = MilParams::zeros(&model.arch);
            for &i in &batch {
                let masks = DropoutMasks::sample(&model.arch, xs[i].nrows(), &mut mask_rng);
                let mut inner: Result<(f64, HeadGrad)> = Err(Error::invalid("unreached"));
                let gi = model.embedding_grad_matrix(xs[i].view(), Mode::Train(&masks), |z| {
                    match head.loss_and_grad(z.view(), labels[i]) {
                        Ok((loss, hg, dz)) => {
                            inner = Ok((loss, hg));
                            dz
                        }
                        Err(e) => {
                            inner = Err(e);
                            Array1::zeros(z.len())
                        }
                    }
                })?;
                let (loss, hg) = inner?;
                total += loss;
                g.points += &hg.points;
                g.radius += hg.radius;
                for (acc, gi) in body.tensors_mut().into_iter().zip(gi.tensors()) {
                    acc.iter_mut().zip(gi).for_each(|(a, v)| *a += v);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            g.points *= scale;
            g.radius *= scale;
            for t in body.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= scale);
            }
            head_step(&mut head_opt, &mut head, &g);
            body_opt.step(model.params.tensors_mut(), body.tensors());
        }
        let mean = total / bags.len() as f64;
        if !mean.is_finite() || !model.params.is_finite() {
            return Err(Error::NonFinite(format!("joint ARPL loss at epoch {epoch}")));
        }
        history.push(mean);
    }
    let zs = model.embed(bags, exec)?;
    let closed_set_bacc = closed_set_bacc(&head, &zs, labels)?;
    Ok(ArplOutcome {
        head,
        model: Some(model),
        history,
        closed_set_bacc,
    })
}

pub const OTSU_BINS: usize = 256;

/// Otsu threshold over a 256-bin histogram spanning `[min, max]`. Bin `i`
/// covers `[min + i w, min + (i + 1) w)`. When several splits attain the
/// maximal between-class variance the threshold is the midpoint of the
/// outermost maximizing bin edges, which puts it mid-gap for well separated
/// modes.
pub fn bimodal_threshold(confidences: &[f64]) -> Result<f64> {
    if confidences.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("confidence".into()));
    }
    let lo = confidences.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = confidences.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if confidences.is_empty() || !(hi > lo) {
        return Err(Error::NoBimodality);
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = [0u64; OTSU_BINS];
    for &c in confidences {
        let b = (((c - lo) / (hi - lo)) * OTSU_BINS as f64) as usize;
        hist[b.min(OTSU_BINS - 1)] += 1;
    }
    let center = |i: usize| i as f64 + 0.5;
    let n = confidences.len() as f64;
    let total: f64 = hist.iter().enumerate().map(|(i, &h)| h as f64 * center(i)).sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let mut var = Vec::with_capacity(OTSU_BINS - 1);
    for (i, &h) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += h as f64;
        s0 += h as f64 * center(i);
        let w1 = n - w0;
        var.push(if w0 == 0.0 || w1 == 0.0 {
            0.0
        } else {
            let d = s0 / w0 - (total - s0) / w1;
            w0 * w1 * d * d
        });
    }
    let best = var.iter().copied().fold(0.0, f64::max);
    let tol = best * 1e-12;
    let first = var.iter().position(|&v| v >= best - tol).unwrap();
    let last = var.iter().rposition(|&v| v >= best - tol).unwrap();
    // split k puts bins 0..=k below, so its edge is at k + 1
    let edge = (first + last) as f64 / 2.0 + 1.0;
    Ok(lo + edge * width)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodDetection {
    /// One flag per sample: confidence below the threshold.
    pub flags: Vec<bool>,
    /// Flagged fraction among true OOD samples; `None` when there are none.
    pub detection_rate: Option<f64>,
    /// Flagged fraction among known samples; `None` when there are none.
    pub false_alarm_rate: Option<f64>,
}

pub fn detect_ood(confidences: &[f64], is_ood: &[bool], threshold: f64) -> Result<OodDetection> {
    if !threshold.is_finite() {
        return Err(Error::NonFinite("OOD threshold".into()));
    }
    if confidences.len() != is_ood.len() {
        return Err(Error::DimensionMismatch {
            expected: confidences.len(),
            found: is_ood.len(),
        });
    }
    let flags: Vec<bool> = confidences.iter().map(|&c| c < threshold).collect();
    let rate = |want: bool| {
        let (hit, n) = flags
            .iter()
            .zip(is_ood)
            .filter(|(_, &o)| o == want)
            .fold((0usize, 0usize), |(h, n), (&f, _)| (h + usize::from(f), n + 1));
        (n > 0).then(|| hit as f64 / n as f64)
    };
    Ok(OodDetection {
        detection_rate: rate(true),
        false_alarm_rate: rate(false),
        flags,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceGap {
    pub gap: f64,
    pub ci: Interval,
}

/// Mean known-sample confidence minus mean OOD confidence, with a
/// percentile bootstrap that resamples both groups independently.
pub fn confidence_gap(known: &[f64], ood: &[f64], cfg: &BootstrapConfig, exec: Exec) -> Result<ConfidenceGap> {
    if known.len() < 2 || ood.len() < 2 {
        return Err(Error::invalid("confidence gap needs two samples per group"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(known) - mean(ood);
    let ci = metrics::bootstrap_replicates(cfg, exec, |rng| {
        let a: f64 = metrics::resample_indices(rng, known.len()).iter().map(|&i| known[i]).sum();
        let b: f64 = metrics::resample_indices(rng, ood.len()).iter().map(|&i| ood[i]).sum();
        a / known.len() as f64 - b / ood.len() as f64
    })?;
    Ok(ConfidenceGap { gap, ci })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn hand_head(lambda_o: f64) -> ReciprocalPointHead {
        ReciprocalPointHead::new(array![[0.0, 0.0], [2.0, 0.0]], 0.0, 1.0, lambda_o).unwrap()
    }

    #[test]
    fn hand_scores() {
        let s = hand_head(1.0).score(array![1.0, 0.0].view()).unwrap();
        assert_abs_diff_eq!(s.scores[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.scores[1], -1.5, epsilon = 1e-15);
        let e = (2.0f64).exp();
        assert_abs_diff_eq!(s.probs[0], e / (e + 1.0), epsilon = 1e-15);
        assert_eq!(s.predicted(), 0);
    }

    #[test]
    fn hand_loss() {
        let h = hand_head(1.0);
        let z = array![1.0, 0.0];
        let ce = (1.0 + (-2.0f64).exp()).ln();
        assert_abs_diff_eq!(h.loss(z.view(), 0).unwrap(), ce + 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(hand_head(0.0).loss(z.view(), 0).unwrap(), ce, epsilon = 1e-14);
    }

    #[test]
    fn symmetric_points_are_uniform() {
        let h = ReciprocalPointHead::new(Array2::zeros((3, 4)), 0.0, 1.0, 0.1).unwrap();
        let s = h.score(array![1.0, -2.0, 0.5, 3.0].view()).unwrap();
        assert!(s.probs.iter().all(|&p| p == s.probs[0]));
        assert_abs_diff_eq!(s.confidence, 1.0 / 3.0, epsilon = 1e-15);
        assert!(h.score(array![1.0].view()).is_err());
    }

    #[test]
    fn gradients_match_differences() {
        let mut h = ReciprocalPointHead::new(array![[0.3, -0.2, 0.5], [-0.4, 0.1, 0.2]], 0.7, 1.3, 0.4).unwrap();
        let z = array![0.9, -0.6, 0.35];
        let (_, g, dz) = h.loss_and_grad(z.view(), 1).unwrap();
        let eps = 1e-6;
        for idx in 0..6 {
            let (r, c) = (idx / 3, idx % 3);
            let orig = h.points[[r, c]];
            h.points[[r, c]] = orig + eps;
            let up = h.loss(z.view(), 1).unwrap();
            h.points[[r, c]] = orig - eps;
            let dn = h.loss(z.view(), 1).unwrap();
            h.points[[r, c]] = orig;
            assert_abs_diff_eq!(g.points[[r, c]], (up - dn) / (2.0 * eps), epsilon = 1e-8);
        }
        for j in 0..3 {
            let mut zp = z.clone();
            zp[j] += eps;
            let mut zm = z.clone();
            zm[j] -= eps;
            let fd = (h.loss(zp.view(), 1).unwrap() - h.loss(zm.view(), 1).unwrap()) / (2.0 * eps);
            assert_abs_diff_eq!(dz[j], fd, epsilon = 1e-8);
        }
        let r0 = h.radius;
        h.radius = r0 + eps;
        let up = h.loss(z.view(), 1).unwrap();
        h.radius = r0 - eps;
        let dn = h.loss(z.view(), 1).unwrap();
        assert_abs_diff_eq!(g.radius, (up - dn) / (2.0 * eps), epsilon = 1e-8);
    }

    #[test]
    fn otsu_cases() {
        let mut v = vec![0.1; 50];
        v.extend([0.9; 50]);
        let t = bimodal_threshold(&v).unwrap();
        assert!(t > 0.1 && t < 0.9);
        assert_abs_diff_eq!(t, 0.5, epsilon = 1e-12);
        assert!(matches!(bimodal_threshold(&[0.4; 10]), Err(Error::NoBimodality)));
    }

    #[test]
    fn detection_cases() {
        let d = detect_ood(&[0.9, 0.2, 0.3], &[false, true, true], 0.5).unwrap();
        assert_eq!(d.flags, vec![false, true, true]);
        assert_eq!(d.detection_rate, Some(1.0));
        assert_eq!(d.false_alarm_rate, Some(0.0));
        let none = detect_ood(&[0.9, 0.2], &[false, false], 0.5).unwrap();
        assert_eq!(none.detection_rate, None);
        assert!(detect_ood(&[0.9], &[true], f64::NAN).is_err());
    }

    #[test]
    fn separable_features_train() {
        let mut r = rng::from_seed(3);
        let mut zs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..80 {
            let y = i % 2;
            let mut z = Array1::from_shape_fn(4, |_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r) * 0.3);
            z[0] += if y == 1 { 2.0 } else { -2.0 };
            zs.push(z);
            ys.push(y);
        }
        let cfg = ArplConfig {
            learning_rate: 1e-2,
            epochs: 30,
            ..Default::default()
        };
        let a = train_arpl(&zs, &ys, &cfg).unwrap();
        let b = train_arpl(&zs, &ys, &cfg).unwrap();
        assert_eq!(a.head, b.head);
        assert!(a.closed_set_bacc >= 0.99);
        assert!(a.history.last().unwrap() < &a.history[0]);
        assert!(a.head.radius >= 0.0);
        assert!(matches!(train_arpl(&zs, &vec![1; 80], &cfg), Err(Error::SingleClass)));
    }
}
