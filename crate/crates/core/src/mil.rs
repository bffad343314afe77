//! Gated-attention multiple-instance classifier.
//!
//! For a bag `H` (N x D) the forward pass is
//!
//! ```text
//! h'_i  = relu(W1 h_i + b1)                      latent (default 512)
//! g_i   = tanh(Va h'_i + ba) * sigmoid(Ua h'_i + bu)   hidden (default 384)
//! a     = softmax_i(w . g_i)                     attention over instances
//! z     = sum_i a_i h'_i
//! logit = Wc z + bc
//! ```
//!
//! In training mode dropout is applied to `h'` and to `g` with masks that are
//! drawn once per optimization step. Gradients are derived by hand and
//! computed in 64-bit floats.
//!
//! With `multi_branch` the attention vector becomes one row per class, each
//! class pools its own `z_c`, and `logit_c = Wc[c] . z_c + bc[c]`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bags::EmbeddingBag;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::optim::Adam;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceClustering {
    /// Instances taken from each end of the attention ranking.
    pub k_sample: usize,
    /// Weight of the bag loss; the instance loss gets `1 - bag_weight`.
    pub bag_weight: f64,
}

impl Default for InstanceClustering {
    fn default() -> Self {
        InstanceClustering {
            k_sample: 8,
            bag_weight: 0.7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilArch {
    pub in_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub multi_branch: bool,
    pub instance_clustering: Option<InstanceClustering>,
}

impl Default for MilArch {
    fn default() -> Self {
        MilArch {
            in_dim: 1024,
            latent_dim: 512,
            hidden_dim: 384,
            n_classes: 2,
            dropout: 0.25,
            multi_branch: false,
            instance_clustering: None,
        }
    }
}

impl MilArch {
    pub fn with_input(in_dim: usize, n_classes: usize) -> Self {
        MilArch {
            in_dim,
            n_classes,
            ..MilArch::default()
        }
    }

    fn branches(&self) -> usize {
        if self.multi_branch {
            self.n_classes
        } else {
            1
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("MIL dimensions must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("MIL head needs at least two classes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if let Some(ic) = self.instance_clustering {
            if ic.k_sample == 0 || !(0.0..=1.0).contains(&ic.bag_weight) {
                return Err(Error::invalid("invalid instance clustering settings"));
            }
        }
        Ok(())
    }
}

/// All trainable tensors. Gradients use the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub va: Array2<f64>,
    pub ba: Array1<f64>,
    pub ua: Array2<f64>,
    pub bu: Array1<f64>,
    /// Attention vectors, one row per branch.
    pub wa: Array2<f64>,
    pub wc: Array2<f64>,
    pub bc: Array1<f64>,
    /// Instance classifiers, rows `2c` and `2c + 1` belong to class `c`.
    /// Zero rows when instance clustering is off.
    pub inst_w: Array2<f64>,
    pub inst_b: Array1<f64>,
}

pub const PARAM_NAMES: [&str; 11] = [
    "w1", "b1", "va", "ba", "ua", "bu", "wa", "wc", "bc", "inst_w", "inst_b",
];

impl MilParams {
    pub fn zeros(arch: &MilArch) -> Self {
        let (d, l, h, c) = (arch.in_dim, arch.latent_dim, arch.hidden_dim, arch.n_classes);
        let inst = if arch.instance_clustering.is_some() { 2 * c } else { 0 };
        MilParams {
            w1: Array2::zeros((l, d)),
            b1: Array1::zeros(l),
            va: Array2::zeros((h, l)),
            ba: Array1::zeros(h),
            ua: Array2::zeros((h, l)),
            bu: Array1::zeros(h),
            wa: Array2::zeros((arch.branches(), h)),
            wc: Array2::zeros((c, l)),
            bc: Array1::zeros(c),
            inst_w: Array2::zeros((inst, l)),
            inst_b: Array1::zeros(inst),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.va.as_slice().expect("standard layout"),
            self.ba.as_slice().expect("standard layout"),
            self.ua.as_slice().expect("standard layout"),
            self.bu.as_slice().expect("standard layout"),
            self.wa.as_slice().expect("standard layout"),
            self.wc.as_slice().expect("standard layout"),
            self.bc.as_slice().expect("standard layout"),
            self.inst_w.as_slice().expect("standard layout"),
            self.inst_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.va.as_slice_mut().expect("standard layout"),
            self.ba.as_slice_mut().expect("standard layout"),
            self.ua.as_slice_mut().expect("standard layout"),
            self.bu.as_slice_mut().expect("standard layout"),
            self.wa.as_slice_mut().expect("standard layout"),
            self.wc.as_slice_mut().expect("standard layout"),
            self.bc.as_slice_mut().expect("standard layout"),
            self.inst_w.as_slice_mut().expect("standard layout"),
            self.inst_b.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Re-lays every tensor out in row-major order.
    fn standardize(&mut self) {
        for m in [
            &mut self.w1,
            &mut self.va,
            &mut self.ua,
            &mut self.wa,
            &mut self.wc,
            &mut self.inst_w,
        ] {
            if !m.is_standard_layout() {
                *m = m.as_standard_layout().into_owned();
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Dropout keep-masks, already scaled by `1 / (1 - p)`.
#[derive(Clone, Debug)]
pub struct DropoutMasks {
    pub latent: Array2<f64>,
    pub gate: Array2<f64>,
}

impl DropoutMasks {
    pub fn sample(arch: &MilArch, n: usize, rng: &mut rng::Rng) -> Self {
        let p = arch.dropout;
        let keep = 1.0 / (1.0 - p);
        let mut draw = |cols: usize| {
            Array2::from_shape_simple_fn((n, cols), || {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            })
        };
        let latent = draw(arch.latent_dim);
        let gate = draw(arch.hidden_dim);
        DropoutMasks { latent, gate }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    Eval,
    Train(&'a DropoutMasks),
}

#[derive(Clone, Debug)]
pub struct MilOutput {
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    /// N x branches attention; each column sums to one.
    pub attention: Array2<f64>,
    /// Pooled representation, one row per branch.
    pub pooled: Array2<f64>,
}

impl MilOutput {
    pub fn predicted(&self) -> usize {
        argmax(self.probs.as_slice().unwrap())
    }

    /// Attention used for ranking: the single branch, or the predicted
    /// class's branch in multi-branch mode.
    pub fn attention_vector(&self) -> Array1<f64> {
        let col = if self.attention.ncols() == 1 { 0 } else { self.predicted() };
        self.attention.column(col).to_owned()
    }

    /// Bag embedding used by downstream heads.
    pub fn embedding(&self) -> Array1<f64> {
        let row = if self.pooled.nrows() == 1 { 0 } else { self.predicted() };
        self.pooled.row(row).to_owned()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-log softmax(logits)[label]`, computed stably.
pub(crate) fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Cache {
    a1: Array2<f64>,
    hd: Array2<f64>,
    t: Array2<f64>,
    s: Array2<f64>,
    gd: Array2<f64>,
    att: Array2<f64>,
    pooled: Array2<f64>,
    logits: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedMilModel {
    pub arch: MilArch,
    pub params: MilParams,
}

fn xavier(rng: &mut rng::Rng, rows: usize, cols: usize) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

impl GatedMilModel {
    /// Xavier-normal weights, zero biases.
    pub fn new(arch: MilArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::from_seed(seed);
        let mut p = MilParams::zeros(&arch);
        p.w1 = xavier(&mut rng, arch.latent_dim, arch.in_dim);
        p.va = xavier(&mut rng, arch.hidden_dim, arch.latent_dim);
        p.ua = xavier(&mut rng, arch.hidden_dim, arch.latent_dim);
        p.wa = xavier(&mut rng, arch.branches(), arch.hidden_dim);
        p.wc = xavier(&mut rng, arch.n_classes, arch.latent_dim);
        if arch.instance_clustering.is_some() {
            p.inst_w = xavier(&mut rng, 2 * arch.n_classes, arch.latent_dim);
        }
        Ok(GatedMilModel { arch, params: p })
    }

    pub fn zeros(arch: MilArch) -> Result<Self> {
        arch.validate()?;
        Ok(GatedMilModel {
            params: MilParams::zeros(&arch),
            arch,
        })
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.arch.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.in_dim,
                found: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("empty bag"));
        }
        Ok(())
    }

    fn run(&self, x: &ArrayView2<f64>, mode: Mode) -> Cache {
        let p = &self.params;
        let mut a1 = x.dot(&p.w1.t());
        a1 += &p.b1;
        let mut hd = a1.mapv(|v| v.max(0.0));
        if let Mode::Train(m) = mode {
            hd *= &m.latent;
        }
        let mut ga = hd.dot(&p.va.t());
        ga += &p.ba;
        let mut gb = hd.dot(&p.ua.t());
        gb += &p.bu;
        let t = ga.mapv(f64::tanh);
        let s = gb.mapv(sigmoid);
        let mut gd = &t * &s;
        if let Mode::Train(m) = mode {
            gd *= &m.gate;
        }
        let e = gd.dot(&p.wa.t());
        let mut att = e;
        for mut col in att.columns_mut() {
            let sm = softmax(&col.to_vec());
            col.assign(&Array1::from(sm));
        }
        let pooled = att.t().dot(&hd);
        let logits = if pooled.nrows() == 1 {
            p.wc.dot(&pooled.row(0)) + &p.bc
        } else {
            Array1::from_shape_fn(self.arch.n_classes, |c| {
                p.wc.row(c).dot(&pooled.row(c)) + p.bc[c]
            })
        };
        Cache {
            a1,
            hd,
            t,
            s,
            gd,
            att,
            pooled,
            logits,
        }
    }

    pub fn forward_matrix(&self, x: ArrayView2<f64>, mode: Mode) -> Result<MilOutput> {
        self.check_input(&x)?;
        let c = self.run(&x, mode);
        let probs = Array1::from(softmax(c.logits.as_slice().unwrap()));
        Ok(MilOutput {
            logits: c.logits,
            probs,
            attention: c.att,
            pooled: c.pooled,
        })
    }

    pub fn forward(&self, bag: &EmbeddingBag, mode: Mode) -> Result<MilOutput> {
        self.forward_matrix(bag.instances_f64().view(), mode)
    }

    /// Top and bottom attention ranks used by the instance-clustering loss.
    fn cluster_picks(&self, att: &Array2<f64>, label: usize, k_sample: usize) -> (Vec<usize>, Vec<usize>) {
        let col = if att.ncols() == 1 { 0 } else { label };
        let n = att.nrows();
        let k = k_sample.min(n / 2);
        let order = rank_desc(&att.column(col).to_vec());
        let top = order[..k].to_vec();
        let bottom = order[n - k..].to_vec();
        (top, bottom)
    }

    /// Training loss for one bag (bag cross-entropy, plus the weighted
    /// instance-clustering term when enabled).
    pub fn loss_matrix(&self, x: ArrayView2<f64>, label: usize, mode: Mode) -> Result<f64> {
        self.check_input(&x)?;
        self.check_label(label)?;
        let c = self.run(&x, mode);
        let bag = cross_entropy(c.logits.as_slice().unwrap(), label);
        Ok(match self.arch.instance_clustering {
            None => bag,
            Some(ic) => {
                let inst = self.instance_loss(&c, label, ic, None);
                ic.bag_weight * bag + (1.0 - ic.bag_weight) * inst
            }
        })
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.arch.n_classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                self.arch.n_classes
            )));
        }
        Ok(())
    }

    /// Mean instance CE over the picked instances. When `grad` is given,
    /// accumulates `scale * d(loss)/d(params)` into it and returns the
    /// gradient with respect to `hd` as well.
    fn instance_loss(
        &self,
        c: &Cache,
        label: usize,
        ic: InstanceClustering,
        grad: Option<(&mut MilParams, &mut Array2<f64>, f64)>,
    ) -> f64 {
        let (top, bottom) = self.cluster_picks(&c.att, label, ic.k_sample);
        let picks: Vec<(usize, usize)> = top
            .iter()
            .map(|&i| (i, 1))
            .chain(bottom.iter().map(|&i| (i, 0)))
            .collect();
        if picks.is_empty() {
            return 0.0;
        }
        let p = &self.params;
        let rows = [2 * label, 2 * label + 1];
        let m = picks.len() as f64;
        let mut loss = 0.0;
        let mut grad = grad;
        for &(i, target) in &picks {
            let h = c.hd.row(i);
            let logits = [
                p.inst_w.row(rows[0]).dot(&h) + p.inst_b[rows[0]],
                p.inst_w.row(rows[1]).dot(&h) + p.inst_b[rows[1]],
            ];
            loss += cross_entropy(&logits, target);
            if let Some((g, dhd, scale)) = grad.as_mut() {
                let pr = softmax(&logits);
                for (j, &r) in rows.iter().enumerate() {
                    let d = *scale * (pr[j] - if j == target { 1.0 } else { 0.0 }) / m;
                    g.inst_w.row_mut(r).scaled_add(d, &h);
                    g.inst_b[r] += d;
                    dhd.row_mut(i).scaled_add(d, &p.inst_w.row(r));
                }
            }
        }
        loss / m
    }

    /// Loss and exact gradients for one bag. In train mode the supplied
    /// masks are treated as constants.
    pub fn loss_and_grad_matrix(
        &self,
        x: ArrayView2<f64>,
        label: usize,
        mode: Mode,
    ) -> Result<(f64, MilParams)> {
        self.check_input(&x)?;
        self.check_label(label)?;
        let p = &self.params;
        let c = self.run(&x, mode);
        let mut g = MilParams::zeros(&self.arch);
        let (bag_w, inst) = match self.arch.instance_clustering {
            Some(ic) => (ic.bag_weight, Some(ic)),
            None => (1.0, None),
        };

        let logits = c.logits.as_slice().unwrap();
        let bag_loss = cross_entropy(logits, label);
        let mut dlogits = Array1::from(softmax(logits));
        dlogits[label] -= 1.0;
        dlogits *= bag_w;

        // classifier
        let branches = c.pooled.nrows();
        let mut dpooled = Array2::<f64>::zeros(c.pooled.raw_dim());
        if branches == 1 {
            g.wc = dlogits
                .view()
                .insert_axis(Axis(1))
                .dot(&c.pooled.row(0).insert_axis(Axis(0)));
            dpooled.row_mut(0).assign(&p.wc.t().dot(&dlogits));
        } else {
            for k in 0..branches {
                g.wc.row_mut(k).scaled_add(dlogits[k], &c.pooled.row(k));
                dpooled.row_mut(k).scaled_add(dlogits[k], &p.wc.row(k));
            }
        }
        g.bc = dlogits;

        let mut loss = bag_loss;
        let mut dhd_extra = None;
        if let Some(ic) = inst {
            let w = 1.0 - ic.bag_weight;
            let mut dhd = Array2::<f64>::zeros(c.hd.raw_dim());
            let inst_loss = self.instance_loss(&c, label, ic, Some((&mut g, &mut dhd, w)));
            loss = bag_w * bag_loss + w * inst_loss;
            dhd_extra = Some(dhd);
        }
        self.body_backward(&x, &c, &dpooled, dhd_extra, mode, &mut g);
        g.standardize();
        Ok((loss, g))
    }

    /// Backpropagates `dpooled` (and an optional direct gradient on the
    /// dropped-out latent activations) through pooling, gating and the
    /// latent projection, writing into `g`.
    fn body_backward(
        &self,
        x: &ArrayView2<f64>,
        c: &Cache,
        dpooled: &Array2<f64>,
        dhd_extra: Option<Array2<f64>>,
        mode: Mode,
        g: &mut MilParams,
    ) {
        let p = &self.params;
        let branches = c.pooled.nrows();
        // attention pooling: pooled = att^T hd
        let datt = c.hd.dot(&dpooled.t());
        let mut dhd = c.att.dot(dpooled);
        if let Some(extra) = dhd_extra {
            dhd += &extra;
        }
        let mut de = Array2::<f64>::zeros(c.att.raw_dim());
        for k in 0..branches {
            let a = c.att.column(k);
            let da = datt.column(k);
            let inner = a.dot(&da);
            Zip::from(de.column_mut(k))
                .and(&a)
                .and(&da)
                .for_each(|o, &ai, &dai| *o = ai * (dai - inner));
        }

        // attention logits: e = gd wa^T
        g.wa = de.t().dot(&c.gd);
        let mut dg = de.dot(&p.wa);
        if let Mode::Train(m) = mode {
            dg *= &m.gate;
        }
        let mut dga = Array2::<f64>::zeros(dg.raw_dim());
        let mut dgb = Array2::<f64>::zeros(dg.raw_dim());
        Zip::from(&mut dga)
            .and(&mut dgb)
            .and(&dg)
            .and(&c.t)
            .and(&c.s)
            .for_each(|a, b, &d, &t, &s| {
                *a = d * s * (1.0 - t * t);
                *b = d * t * s * (1.0 - s);
            });
        g.va = dga.t().dot(&c.hd);
        g.ba = dga.sum_axis(Axis(0));
        g.ua = dgb.t().dot(&c.hd);
        g.bu = dgb.sum_axis(Axis(0));
        dhd += &dga.dot(&p.va);
        dhd += &dgb.dot(&p.ua);

        // latent projection
        if let Mode::Train(m) = mode {
            dhd *= &m.latent;
        }
        Zip::from(&mut dhd).and(&c.a1).for_each(|d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
        g.w1 = dhd.t().dot(x);
        g.b1 = dhd.sum_axis(Axis(0));
    }

    /// Forward pass plus a closure-free backward from an upstream gradient
    /// on the single-branch pooled embedding. Classifier gradients are zero.
    pub fn embedding_grad_matrix(
        &self,
        x: ArrayView2<f64>,
        mode: Mode,
        upstream: impl FnOnce(&Array1<f64>) -> Array1<f64>,
    ) -> Result<MilParams> {
        self.check_input(&x)?;
        if self.arch.multi_branch {
            return Err(Error::invalid("embedding gradients need a single attention branch"));
        }
        let c = self.run(&x, mode);
        let dz = upstream(&c.pooled.row(0).to_owned());
        if dz.len() != self.arch.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.latent_dim,
                found: dz.len(),
            });
        }
        let dpooled = dz.insert_axis(Axis(0));
        let mut g = MilParams::zeros(&self.arch);
        self.body_backward(&x, &c, &dpooled, None, mode, &mut g);
        g.standardize();
        Ok(g)
    }

    pub fn loss_and_grad(&self, bag: &EmbeddingBag, label: usize, mode: Mode) -> Result<(f64, MilParams)> {
        self.loss_and_grad_matrix(bag.instances_f64().view(), label, mode)
    }

    /// Eval-mode class probabilities for a batch of bags.
    pub fn predict_proba(&self, bags: &[EmbeddingBag], exec: Exec) -> Result<Vec<Vec<f64>>> {
        exec.map(bags, |b| self.forward(b, Mode::Eval).map(|o| o.probs.to_vec()))
            .into_iter()
            .collect()
    }

    /// Eval-mode pooled embeddings for a batch of bags.
    pub fn embed(&self, bags: &[EmbeddingBag], exec: Exec) -> Result<Vec<Array1<f64>>> {
        exec.map(bags, |b| self.forward(b, Mode::Eval).map(|o| o.embedding()))
            .into_iter()
            .collect()
    }
}

/// Indices sorted by descending value, ties broken by ascending index.
pub(crate) fn rank_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            max_epochs: 100,
            patience: 10,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: GatedMilModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.train_loss)
    }
}

/// Per-bag Adam training with early stopping on validation loss. An empty
/// validation set falls back to the training loss.
pub fn train_mil(
    bags: &[EmbeddingBag],
    labels: &[usize],
    train: &[usize],
    val: &[usize],
    arch: MilArch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if labels.len() != bags.len() {
        return Err(Error::invalid("one label per bag required"));
    }
    if !(cfg.learning_rate > 0.0) || cfg.max_epochs == 0 {
        return Err(Error::invalid("learning rate must be positive and epochs at least 1"));
    }
    let first = train.first().map(|&i| labels[i]);
    if first.is_none() || train.iter().all(|&i| Some(labels[i]) == first) {
        return Err(Error::SingleClass);
    }
    if let Some(&bad) = train.iter().chain(val).find(|&&i| labels[i] >= arch.n_classes) {
        return Err(Error::invalid(format!(
            "label {} out of range for {} classes",
            labels[bad], arch.n_classes
        )));
    }
    let xs: Vec<Array2<f64>> = bags.iter().map(EmbeddingBag::instances_f64).collect();
    let mut model = GatedMilModel::new(arch, rng::derive_seed(cfg.seed, 0))?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut stale = 0usize;
    let mut history = Vec::new();
    let mut order = train.to_vec();
    for epoch in 0..cfg.max_epochs {
        let mut rng = rng::stream(cfg.seed, 1 + epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let masks = DropoutMasks::sample(&model.arch, xs[i].nrows(), &mut rng);
            let (loss, grad) =
                model.loss_and_grad_matrix(xs[i].view(), labels[i], Mode::Train(&masks))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            total += loss;
            opt.step(model.params.tensors_mut(), grad.tensors());
        }
        let train_loss = total / order.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            let mut s = 0.0;
            for &i in val {
                s += model.loss_matrix(xs[i].view(), labels[i], Mode::Eval)?;
            }
            s / val.len() as f64
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best.1,
        history,
        best_epoch: best.2,
    })
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    /// Class probabilities for every bag from the fold that held it out.
    pub oof_probs: Vec<Vec<f64>>,
    pub folds: Vec<TrainOutcome>,
}

/// Trains one model per fold (test fold `f`, validation fold `f + 1`) and
/// collects out-of-fold probabilities. Fold `f` uses seed stream `f` of
/// `cfg.seed`, so results do not depend on `exec`.
pub fn cross_validate(
    bags: &[EmbeddingBag],
    labels: &[usize],
    split: &crate::bags::DatasetSplit,
    arch: MilArch,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<CrossValidation> {
    if split.folds.len() != bags.len() {
        return Err(Error::DimensionMismatch {
            expected: bags.len(),
            found: split.folds.len(),
        });
    }
    let runs = exec.map_range(split.k, |f| -> Result<(Vec<usize>, Vec<Vec<f64>>, TrainOutcome)> {
        let (train, val, test) = split.train_val_test(f);
        let fold_cfg = TrainConfig {
            seed: rng::derive_seed(cfg.seed, f as u64),
            ..cfg.clone()
        };
        let out = train_mil(bags, labels, &train, &val, arch, &fold_cfg)?;
        let held: Vec<EmbeddingBag> = test.iter().map(|&i| bags[i].clone()).collect();
        let probs = out.model.predict_proba(&held, Exec::Sequential)?;
        Ok((test, probs, out))
    });
    let mut oof_probs = vec![Vec::new(); bags.len()];
    let mut folds = Vec::with_capacity(split.k);
    for run in runs {
        let (test, probs, out) = run?;
        for (i, p) in test.into_iter().zip(probs) {
            oof_probs[i] = p;
        }
        folds.push(out);
    }
    Ok(CrossValidation { oof_probs, folds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPatch {
    pub rank: usize,
    pub index: usize,
    pub x: i32,
    pub y: i32,
    pub attention: f64,
}

/// The `k` most attended patches, highest first; ties go to the lower
/// instance index. `k` larger than the bag is clamped.
pub fn top_k_patches(bag: &EmbeddingBag, model: &GatedMilModel, k: usize) -> Result<Vec<RankedPatch>> {
    let out = model.forward(bag, Mode::Eval)?;
    let att = out.attention_vector().to_vec();
    Ok(rank_desc(&att)
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, i)| RankedPatch {
            rank: rank + 1,
            index: i,
            x: bag.coords[i].0,
            y: bag.coords[i].1,
            attention: att[i],
        })
        .collect())
}

/// Rows of `x` in the given order (used to check permutation invariance).
pub fn permute_rows(x: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((order.len(), x.ncols()));
    for (dst, &src) in order.iter().enumerate() {
        out.slice_mut(s![dst, ..]).assign(&x.row(src));
    }
    out
}
