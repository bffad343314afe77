//! Low-rank adapters, the vision-to-language projection MLP, linear probes
//! and a per-token linear segmentation head trained with Dice loss.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::{argmax, cross_entropy, softmax};
use crate::optim::{Adam, Plateau, PlateauAction};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 64,
            alpha: 64.0,
            dropout: 0.25,
        }
    }
}

/// `W~ = W0 + alpha * U V` with `W0` frozen (d2 x d1), `U` (d2 x r) and
/// `V` (r x d1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    w0: Array2<f64>,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraLayer {
    /// Zero `U` and `V ~ N(0, 1/r)`, so the merged matrix starts at `W0`.
    pub fn init(w0: Array2<f64>, cfg: &LoraConfig, seed: u64) -> Result<Self> {
        let (d2, d1) = w0.dim();
        let r = cfg.rank;
        if r == 0 || r >= d1.min(d2) {
            return Err(Error::invalid(format!(
                "LoRA rank {r} must be in [1, min(d1, d2)) = [1, {})",
                d1.min(d2)
            )));
        }
        let normal = Normal::new(0.0, 1.0 / (r as f64).sqrt()).unwrap();
        let mut rng = rng::from_seed(seed);
        let v = Array2::from_shape_fn((r, d1), |_| normal.sample(&mut rng));
        LoraLayer::from_parts(w0, Array2::zeros((d2, r)), v, cfg.alpha, cfg.dropout)
    }

    pub fn from_parts(w0: Array2<f64>, u: Array2<f64>, v: Array2<f64>, alpha: f64, dropout: f64) -> Result<Self> {
        let (d2, d1) = w0.dim();
        if u.nrows() != d2 || v.ncols() != d1 || u.ncols() != v.nrows() {
            return Err(Error::invalid(format!(
                "LoRA shapes W0 {:?}, U {:?}, V {:?} do not compose",
                w0.dim(),
                u.dim(),
                v.dim()
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout {dropout} not in [0, 1)")));
        }
        Ok(LoraLayer {
            w0,
            u,
            v,
            alpha,
            dropout,
        })
    }

    pub fn w0(&self) -> &Array2<f64> {
        &self.w0
    }

    pub fn rank(&self) -> usize {
        self.v.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.nrows()
    }

    pub fn merge(&self) -> Array2<f64> {
        &self.w0 + &(self.u.dot(&self.v) * self.alpha)
    }

    fn check(&self, x: &ArrayView1<f64>) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Eval mode: `W0 x + alpha U (V x)`.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check(&x)?;
        Ok(self.w0.dot(&x) + self.u.dot(&self.v.dot(&x)) * self.alpha)
    }

    /// Train mode: inverted dropout on the adapter input only.
    pub fn forward_train(&self, x: ArrayView1<f64>, rng: &mut rng::Rng) -> Result<Array1<f64>> {
        self.check(&x)?;
        let keep = 1.0 - self.dropout;
        let dropped = x.mapv(|v| if rng.random::<f64>() < keep { v / keep } else { 0.0 });
        Ok(self.w0.dot(&x) + self.u.dot(&self.v.dot(&dropped)) * self.alpha)
    }
}

pub const PROJECTION_DIM: usize = 3584;

/// Two-layer GELU projection from vision embeddings to the language-model
/// width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

impl ProjectionMlp {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("projection dimensions must be positive"));
        }
        let mut rng = rng::from_seed(seed);
        let mut dense = |rows: usize, cols: usize| {
            let n = Normal::new(0.0, (1.0 / cols as f64).sqrt()).unwrap();
            Array2::from_shape_fn((rows, cols), |_| n.sample(&mut rng))
        };
        let w1 = dense(out_dim, in_dim);
        let w2 = dense(out_dim, out_dim);
        Ok(ProjectionMlp {
            w1,
            b1: Array1::zeros(out_dim),
            w2,
            b2: Array1::zeros(out_dim),
        })
    }

    pub fn with_default_width(in_dim: usize, seed: u64) -> Result<Self> {
        ProjectionMlp::new(in_dim, PROJECTION_DIM, seed)
    }

    pub fn out_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.w1.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.w1.ncols(),
                found: x.len(),
            });
        }
        let h = (self.w1.dot(&x) + &self.b1).mapv(gelu);
        Ok(self.w2.dot(&h) + &self.b2)
    }
}

pub const MAX_PROBE_EPOCHS: usize = 80;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub embedding_dim: usize,
    pub n_classes: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Capped at 80.
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_epochs() -> usize {
    MAX_PROBE_EPOCHS
}

fn default_batch() -> usize {
    32
}

impl ProbeConfig {
    pub fn new(embedding_dim: usize, n_classes: usize) -> Self {
        ProbeConfig {
            embedding_dim,
            n_classes,
            learning_rate: default_lr(),
            max_epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
        }
    }

    /// Weight of the squared Frobenius norm: `100 / (M C)`.
    pub fn lambda(&self) -> f64 {
        100.0 / (self.embedding_dim as f64 * self.n_classes as f64)
    }

    pub fn epochs(&self) -> usize {
        if self.max_epochs > MAX_PROBE_EPOCHS {
            log::warn!("probe epochs capped at {MAX_PROBE_EPOCHS} (requested {})", self.max_epochs);
        }
        self.max_epochs.min(MAX_PROBE_EPOCHS)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// C x M
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearClassifier {
    pub fn logits(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.w.dot(&x) + &self.b
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        x.rows()
            .into_iter()
            .map(|r| argmax(self.logits(r).as_slice().unwrap()))
            .collect()
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, labels: &[usize]) -> f64 {
        let pred = self.predict(x);
        pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
    }

    fn mean_ce(&self, x: ArrayView2<f64>, labels: &[usize]) -> f64 {
        x.rows()
            .into_iter()
            .zip(labels)
            .map(|(r, &y)| cross_entropy(self.logits(r).as_slice().unwrap(), y))
            .sum::<f64>()
            / labels.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEpoch {
    pub epoch: usize,
    /// Cross-entropy plus the weight penalty.
    pub train_loss: f64,
    pub monitored_loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub classifier: LinearClassifier,
    pub lambda: f64,
    pub history: Vec<ProbeEpoch>,
}

fn check_classes(labels: &[usize], n_classes: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::invalid("a probe needs at least two classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
    }
    if labels.iter().all(|&l| Some(&l) == labels.first()) {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Minibatch Adam on `CE + lambda |W|_F^2` (bias unpenalized). The plateau
/// schedule watches the validation loss when `val` is given, the training
/// loss otherwise; training stops at the epoch cap or when the schedule
/// reaches its floor.
pub fn train_linear_probe(
    features: ArrayView2<f64>,
    labels: &[usize],
    val: Option<(ArrayView2<f64>, &[usize])>,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let (n, m) = features.dim();
    if m != cfg.embedding_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.embedding_dim,
            found: m,
        });
    }
    if labels.len() != n {
        return Err(Error::invalid("one label per feature row required"));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::invalid("probe needs a positive learning rate and batch size"));
    }
    check_classes(labels, cfg.n_classes)?;
    let c = cfg.n_classes;
    let lambda = cfg.lambda();
    let mut clf = LinearClassifier {
        w: Array2::zeros((c, m)),
        b: Array1::zeros(c),
    };
    let mut opt = Adam::new(cfg.learning_rate);
    let mut plateau = Plateau::default();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs() {
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = Array2::<f64>::zeros((c, m));
            let mut gb = Array1::<f64>::zeros(c);
            for &i in batch {
                let x = features.row(i);
                let mut p = Array1::from(softmax(clf.logits(x).as_slice().unwrap()));
                p[labels[i]] -= 1.0;
                for k in 0..c {
                    gw.row_mut(k).scaled_add(p[k], &x);
                }
                gb += &p;
            }
            let scale = 1.0 / batch.len() as f64;
            gw *= scale;
            gb *= scale;
            gw.scaled_add(2.0 * lambda, &clf.w);
            opt.step(
                vec![clf.w.as_slice_mut().unwrap(), clf.b.as_slice_mut().unwrap()],
                vec![gw.as_slice().unwrap(), gb.as_slice().unwrap()],
            );
        }
        let penalty = lambda * clf.w.iter().map(|v| v * v).sum::<f64>();
        let train_loss = clf.mean_ce(features, labels) + penalty;
        let monitored_loss = match val {
            Some((vx, vy)) => clf.mean_ce(vx, vy) + penalty,
            None => train_loss,
        };
        if !train_loss.is_finite() || !monitored_loss.is_finite() {
            return Err(Error::NonFinite(format!("probe loss at epoch {epoch}")));
        }
        history.push(ProbeEpoch {
            epoch,
            train_loss,
            monitored_loss,
            learning_rate: opt.lr,
        });
        if plateau.observe(monitored_loss, &mut opt.lr) == PlateauAction::Exhausted {
            break;
        }
    }
    Ok(ProbeOutcome {
        classifier: clf,
        lambda,
        history,
    })
}

pub const DICE_EPS: f64 = 1e-6;

/// `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn dice_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::invalid(format!(
            "prediction shape {:?} differs from target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("predicted probabilities must lie in [0, 1]"));
    }
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (pred.sum() + target.sum() + DICE_EPS))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    /// Token grid side.
    pub grid: usize,
    /// Mask pixels per token side.
    pub upsample: usize,
    /// Class 0 is background.
    pub n_classes: usize,
    pub learning_rate: f64,
    /// Capped at 80.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            grid: 14,
            upsample: 16,
            n_classes: 2,
            learning_rate: 1e-4,
            max_epochs: MAX_PROBE_EPOCHS,
            batch_size: 1,
            seed: 0,
        }
    }
}

/// Linear classifier applied to every token of a `g x g x d` grid, with
/// nearest-neighbour upsampling to a `(g u) x (g u)` mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegHead {
    pub classifier: LinearClassifier,
    pub grid: usize,
    pub upsample: usize,
}

impl SegHead {
    pub fn mask_side(&self) -> usize {
        self.grid * self.upsample
    }

    fn check(&self, tokens: &ArrayView3<f64>) -> Result<()> {
        let (g1, g2, d) = tokens.dim();
        let want = self.classifier.w.ncols();
        if g1 != self.grid || g2 != self.grid || d != want {
            return Err(Error::invalid(format!(
                "token grid {:?} does not match head ({g}x{g}x{want})",
                tokens.dim(),
                g = self.grid,
            )));
        }
        Ok(())
    }

    /// Per-token class probabilities, `g x g x C`.
    pub fn token_probs(&self, tokens: ArrayView3<f64>) -> Result<Array3<f64>> {
        self.check(&tokens)?;
        let c = self.classifier.b.len();
        let mut out = Array3::zeros((self.grid, self.grid, c));
        for i in 0..self.grid {
            for j in 0..self.grid {
                let p = softmax(self.classifier.logits(tokens.slice(s![i, j, ..])).as_slice().unwrap());
                out.slice_mut(s![i, j, ..]).assign(&Array1::from(p));
            }
        }
        Ok(out)
    }

    /// Argmax label mask at full resolution.
    pub fn predict_mask(&self, tokens: ArrayView3<f64>) -> Result<Array2<usize>> {
        let probs = self.token_probs(tokens)?;
        let u = self.upsample;
        Ok(Array2::from_shape_fn((self.mask_side(), self.mask_side()), |(y, x)| {
            argmax(probs.slice(s![y / u, x / u, ..]).as_slice().unwrap())
        }))
    }
}

/// Pixels of class `c` inside each token block, `g x g`.
fn block_counts(mask: &ArrayView2<usize>, grid: usize, up: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((grid, grid), |(i, j)| {
        mask.slice(s![i * up..(i + 1) * up, j * up..(j + 1) * up])
            .iter()
            .filter(|&&v| v == c)
            .count() as f64
    })
}

/// Soft Dice loss between upsampled token probabilities and the one-hot mask,
/// averaged over all classes (background included), with the logit gradient
/// (`g x g x C`).
fn seg_loss_and_grad(head: &SegHead, tokens: ArrayView3<f64>, mask: ArrayView2<usize>) -> Result<(f64, Array3<f64>)> {
    let probs = head.token_probs(tokens)?;
    let (g, up) = (head.grid, head.upsample);
    let n_c = probs.dim().2;
    let area = (up * up) as f64;
    let mut dprob = Array3::<f64>::zeros(probs.raw_dim());
    let mut loss = 0.0;
    let classes = n_c as f64;
    for c in 0..n_c {
        let n = block_counts(&mask, g, up, c);
        let p = probs.slice(s![.., .., c]);
        let a: f64 = (&p * &n).sum();
        let b = area * p.sum() + n.sum() + DICE_EPS;
        let num = 2.0 * a + DICE_EPS;
        loss += (1.0 - num / b) / classes;
        // d(1 - num/b)/dp = -(2 n b - num area) / b^2
        let mut dp = dprob.slice_mut(s![.., .., c]);
        dp.zip_mut_with(&n, |d, &nk| *d = -(2.0 * nk * b - num * area) / (b * b) / classes);
    }
    let mut dlogit = Array3::zeros(probs.raw_dim());
    for i in 0..g {
        for j in 0..g {
            let p = probs.slice(s![i, j, ..]);
            let dp = dprob.slice(s![i, j, ..]);
            let inner = p.dot(&dp);
            let mut dl = dlogit.slice_mut(s![i, j, ..]);
            dl.assign(&(&p * &(&dp - inner)));
        }
    }
    Ok((loss, dlogit))
}

/// Intersection over union per foreground class, averaged. An empty
/// prediction on an empty target scores 1.
pub fn mean_iou(pred: ArrayView2<usize>, target: ArrayView2<usize>, n_classes: usize) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::invalid("IoU masks differ in shape"));
    }
    let mut total = 0.0;
    for c in 1..n_classes {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &t) in pred.iter().zip(target) {
            inter += usize::from(p == c && t == c);
            union += usize::from(p == c || t == c);
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / (n_classes - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegOutcome {
    pub head: SegHead,
    /// Mean Dice loss per epoch.
    pub history: Vec<f64>,
    /// Mean per-image IoU on the held-out set; `None` without one.
    pub val_iou: Option<f64>,
}

pub type SegSet<'a> = (&'a [Array3<f64>], &'a [Array2<usize>]);

/// Adam on the Dice loss (one image per step by default) with the plateau
/// schedule, capped at 80 epochs. Fails if no training mask contains
/// foreground.
pub fn train_seg_head(train: SegSet, val: Option<SegSet>, cfg: &SegConfig) -> Result<SegOutcome> {
    let (tokens, masks) = train;
    if tokens.is_empty() || tokens.len() != masks.len() {
        return Err(Error::invalid("one mask per token grid required"));
    }
    if cfg.n_classes < 2 || cfg.grid == 0 || cfg.upsample == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("segmentation head needs >= 2 classes and positive sizes"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let side = cfg.grid * cfg.upsample;
    for m in masks.iter().chain(val.map_or(&[][..], |v| v.1)) {
        if m.dim() != (side, side) {
            return Err(Error::invalid(format!("mask {:?} is not {side}x{side}", m.dim())));
        }
        if m.iter().any(|&v| v >= cfg.n_classes) {
            return Err(Error::invalid("mask label out of range"));
        }
    }
    if masks.iter().all(|m| m.iter().all(|&v| v == 0)) {
        return Err(Error::invalid("every training mask is empty"));
    }
    let d = tokens[0].dim().2;
    let mut head = SegHead {
        classifier: LinearClassifier {
            w: Array2::zeros((cfg.n_classes, d)),
            b: Array1::zeros(cfg.n_classes),
        },
        grid: cfg.grid,
        upsample: cfg.upsample,
    };
    let mut opt = Adam::new(cfg.learning_rate);
    let mut plateau = Plateau::default();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    let epochs = cfg.max_epochs.min(MAX_PROBE_EPOCHS);
    for epoch in 0..epochs {
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = Array2::<f64>::zeros(head.classifier.w.raw_dim());
            let mut gb = Array1::<f64>::zeros(cfg.n_classes);
            for &i in batch {
                let (loss, dlogit) = seg_loss_and_grad(&head, tokens[i].view(), masks[i].view())?;
                total += loss;
                let flat_t = tokens[i].view().into_shape_with_order((cfg.grid * cfg.grid, d)).unwrap();
                let flat_l = dlogit.into_shape_with_order((cfg.grid * cfg.grid, cfg.n_classes)).unwrap();
                gw += &flat_l.t().dot(&flat_t);
                gb += &flat_l.sum_axis(Axis(0));
            }
            let scale = 1.0 / batch.len() as f64;
            gw *= scale;
            gb *= scale;
            opt.step(
                vec![head.classifier.w.as_slice_mut().unwrap(), head.classifier.b.as_slice_mut().unwrap()],
                vec![gw.as_standard_layout().as_slice().unwrap(), gb.as_slice().unwrap()],
            );
        }
        let mean = total / tokens.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("Dice loss at epoch {epoch}")));
        }
        history.push(mean);
        if plateau.observe(mean, &mut opt.lr) == PlateauAction::Exhausted {
            break;
        }
    }
    let val_iou = match val {
        None => None,
        Some((vt, vm)) => {
            let mut s = 0.0;
            for (t, m) in vt.iter().zip(vm) {
                s += mean_iou(head.predict_mask(t.view())?.view(), m.view(), cfg.n_classes)?;
            }
            Some(s / vt.len().max(1) as f64)
        }
    };
    Ok(SegOutcome { head, history, val_iou })
}
