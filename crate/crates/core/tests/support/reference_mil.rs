//! Scalar-loop evaluation of the gated-attention MIL forward pass, written
//! without ndarray operations so it can serve as an independent oracle.

#![allow(dead_code)]

use cers_core::mil::{DropoutMasks, GatedMilModel, MilArch};
use ndarray::Array2;
use rand::Rng;

pub struct Reference {
    pub logits: Vec<f64>,
    /// attention[branch][instance]
    pub attention: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn forward(model: &GatedMilModel, x: &Array2<f64>, masks: Option<&DropoutMasks>) -> Reference {
    let a = &model.arch;
    let p = &model.params;
    let n = x.nrows();
    let mut hd = vec![vec![0.0; a.latent_dim]; n];
    let mut gd = vec![vec![0.0; a.hidden_dim]; n];
    for i in 0..n {
        for l in 0..a.latent_dim {
            let mut s = p.b1[l];
            for j in 0..a.in_dim {
                s += p.w1[[l, j]] * x[[i, j]];
            }
            hd[i][l] = if s > 0.0 { s } else { 0.0 };
            if let Some(m) = masks {
                hd[i][l] *= m.latent[[i, l]];
            }
        }
        for h in 0..a.hidden_dim {
            let mut ga = p.ba[h];
            let mut gb = p.bu[h];
            for l in 0..a.latent_dim {
                ga += p.va[[h, l]] * hd[i][l];
                gb += p.ua[[h, l]] * hd[i][l];
            }
            gd[i][h] = ga.tanh() * sigmoid(gb);
            if let Some(m) = masks {
                gd[i][h] *= m.gate[[i, h]];
            }
        }
    }
    let branches = if a.multi_branch { a.n_classes } else { 1 };
    let mut attention = Vec::new();
    let mut pooled = Vec::new();
    for b in 0..branches {
        let mut e = vec![0.0; n];
        for i in 0..n {
            for h in 0..a.hidden_dim {
                e[i] += p.wa[[b, h]] * gd[i][h];
            }
        }
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
        let att: Vec<f64> = e.iter().map(|v| (v - m).exp() / z).collect();
        let mut pool = vec![0.0; a.latent_dim];
        for i in 0..n {
            for l in 0..a.latent_dim {
                pool[l] += att[i] * hd[i][l];
            }
        }
        attention.push(att);
        pooled.push(pool);
    }
    let mut logits = vec![0.0; a.n_classes];
    for c in 0..a.n_classes {
        let z = &pooled[if a.multi_branch { c } else { 0 }];
        logits[c] = p.bc[c];
        for l in 0..a.latent_dim {
            logits[c] += p.wc[[c, l]] * z[l];
        }
    }
    Reference { logits, attention }
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Bag cross-entropy through the reference forward pass.
pub fn loss(model: &GatedMilModel, x: &Array2<f64>, label: usize, masks: Option<&DropoutMasks>) -> f64 {
    cross_entropy(&forward(model, x, masks).logits, label)
}

pub struct CheckCase {
    pub model: GatedMilModel,
    pub x: Array2<f64>,
    pub label: usize,
    pub masks: Option<DropoutMasks>,
}

/// Random small architecture, parameters, bag and (every other seed)
/// dropout masks.
pub fn random_case(seed: u64) -> CheckCase {
    let mut r = cers_core::rng::from_seed(seed);
    let arch = MilArch {
        in_dim: r.random_range(3..7),
        latent_dim: r.random_range(3..9),
        hidden_dim: r.random_range(2..6),
        n_classes: r.random_range(2..4),
        dropout: 0.25,
        multi_branch: seed % 3 == 2,
        instance_clustering: None,
    };
    let mut model = GatedMilModel::new(arch, seed).unwrap();
    for t in model.params.tensors_mut() {
        for v in t.iter_mut() {
            *v = (r.random::<f64>() - 0.5) * 1.6;
        }
    }
    let n = r.random_range(1..8);
    let x = Array2::from_shape_fn((n, arch.in_dim), |_| (r.random::<f64>() - 0.5) * 3.0);
    let label = r.random_range(0..arch.n_classes);
    let masks = (seed % 2 == 1).then(|| DropoutMasks::sample(&arch, n, &mut r));
    CheckCase { model, x, label, masks }
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so that gradients that are
/// zero up to rounding do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

/// Largest relative error between analytic and central-difference
/// gradients over every scalar parameter, with its tensor and index.
pub fn max_relative_error(case: &mut CheckCase) -> (f64, usize, usize) {
    use cers_core::mil::Mode;
    let mode = match &case.masks {
        Some(m) => Mode::Train(m),
        None => Mode::Eval,
    };
    let (_, grad) = case.model.loss_and_grad_matrix(case.x.view(), case.label, mode).unwrap();
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst = (0.0, 0, 0);
    for (t, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let orig = case.model.params.tensors_mut()[t][k];
            case.model.params.tensors_mut()[t][k] = orig + FD_STEP;
            let up = loss(&case.model, &case.x, case.label, case.masks.as_ref());
            case.model.params.tensors_mut()[t][k] = orig - FD_STEP;
            let dn = loss(&case.model, &case.x, case.label, case.masks.as_ref());
            case.model.params.tensors_mut()[t][k] = orig;
            let numeric = (up - dn) / (2.0 * FD_STEP);
            let rel = (g[k] - numeric).abs() / g[k].abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst.0 {
                worst = (rel, t, k);
            }
        }
    }
    worst
}
