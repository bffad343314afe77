mod support;

use cers_core::mil::{GatedMilModel, InstanceClustering, MilArch, Mode};
use ndarray::{array, Array1, Array2};
use support::reference_mil as reference;

fn hand_model() -> GatedMilModel {
    let arch = MilArch {
        in_dim: 4,
        latent_dim: 3,
        hidden_dim: 2,
        n_classes: 2,
        ..MilArch::default()
    };
    let mut m = GatedMilModel::zeros(arch).unwrap();
    let p = &mut m.params;
    p.w1 = array![[0.1, -0.2, 0.3, 0.05], [0.2, 0.1, -0.1, 0.3], [-0.3, 0.2, 0.2, 0.1]];
    p.b1 = array![0.01, -0.02, 0.03];
    p.va = array![[0.3, -0.1, 0.2], [0.1, 0.4, -0.2]];
    p.ba = array![0.05, -0.05];
    p.ua = array![[-0.2, 0.3, 0.1], [0.2, 0.1, 0.3]];
    p.bu = array![0.0, 0.1];
    p.wa = array![[0.7, -0.4]];
    p.wc = array![[0.5, -0.3, 0.2], [-0.1, 0.4, 0.3]];
    p.bc = array![0.02, -0.01];
    m
}

#[test]
fn hand_weights_match_scalar_evaluation() {
    let m = hand_model();
    let x = array![[1.0, 0.5, -0.5, 2.0], [0.3, -1.2, 0.8, 0.1], [-0.7, 0.9, 1.5, -0.4]];
    let out = m.forward_matrix(x.view(), Mode::Eval).unwrap();
    let r = reference::forward(&m, &x, None);
    for c in 0..2 {
        assert!((out.logits[c] - r.logits[c]).abs() < 1e-12);
    }
    for i in 0..3 {
        assert!((out.attention[[i, 0]] - r.attention[0][i]).abs() < 1e-12);
    }
}

#[test]
fn attention_is_a_distribution_and_order_free() {
    for seed in 0..10 {
        let case = reference::random_case(seed);
        let out = case.model.forward_matrix(case.x.view(), Mode::Eval).unwrap();
        for col in out.attention.columns() {
            assert!(col.iter().all(|&a| a >= 0.0));
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
        let n = case.x.nrows();
        let order: Vec<usize> = (0..n).rev().collect();
        let px = cers_core::mil::permute_rows(&case.x, &order);
        let pout = case.model.forward_matrix(px.view(), Mode::Eval).unwrap();
        for (a, b) in out.logits.iter().zip(pout.logits.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (dst, &src) in order.iter().enumerate() {
            assert!((pout.attention[[dst, 0]] - out.attention[[src, 0]]).abs() < 1e-12);
        }
    }
}

#[test]
fn train_mode_matches_reference_with_masks() {
    for seed in [1, 3, 5] {
        let case = reference::random_case(seed);
        let masks = case.masks.as_ref().unwrap();
        let out = case.model.forward_matrix(case.x.view(), Mode::Train(masks)).unwrap();
        let r = reference::forward(&case.model, &case.x, Some(masks));
        for (a, b) in out.logits.iter().zip(&r.logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut case = reference::random_case(seed);
        let (err, t, k) = reference::max_relative_error(&mut case);
        assert!(err < 1e-5, "seed {seed}: relative error {err:e} at tensor {t} index {k}");
    }
}

#[test]
fn instance_clustering_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut case = reference::random_case(100 + seed * 2);
        let mut arch = case.model.arch;
        arch.instance_clustering = Some(InstanceClustering {
            k_sample: 2,
            bag_weight: 0.6,
        });
        let mut model = GatedMilModel::new(arch, seed).unwrap();
        let mut r = cers_core::rng::from_seed(seed);
        for t in model.params.tensors_mut() {
            for v in t.iter_mut() {
                *v = (rand::Rng::random::<f64>(&mut r) - 0.5) * 1.6;
            }
        }
        case.model = model;
        let x = Array2::from_shape_fn((6, arch.in_dim), |(i, j)| ((i * 5 + j * 3) as f64 * 0.7).sin() * 1.5);
        let (_, g) = case.model.loss_and_grad_matrix(x.view(), case.label, Mode::Eval).unwrap();
        let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.to_vec()).collect();
        for (t, grad) in analytic.iter().enumerate() {
            for k in 0..grad.len() {
                let orig = case.model.params.tensors_mut()[t][k];
                let eval = |m: &GatedMilModel| m.loss_matrix(x.view(), case.label, Mode::Eval).unwrap();
                case.model.params.tensors_mut()[t][k] = orig + reference::FD_STEP;
                let up = eval(&case.model);
                case.model.params.tensors_mut()[t][k] = orig - reference::FD_STEP;
                let dn = eval(&case.model);
                case.model.params.tensors_mut()[t][k] = orig;
                let num = (up - dn) / (2.0 * reference::FD_STEP);
                let rel = (grad[k] - num).abs() / grad[k].abs().max(num.abs()).max(reference::REL_FLOOR);
                assert!(rel < 1e-5, "seed {seed} tensor {t} index {k}: {} vs {num}", grad[k]);
            }
        }
    }
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let case = reference::random_case(4);
    let mut model = case.model;
    let w = Array1::from_shape_fn(model.arch.latent_dim, |l| (l as f64 * 0.9).cos());
    // objective: w . z, so the upstream gradient is w
    let g = model
        .embedding_grad_matrix(case.x.view(), Mode::Eval, |_| w.clone())
        .unwrap();
    let objective = |m: &GatedMilModel| m.forward_matrix(case.x.view(), Mode::Eval).unwrap().embedding().dot(&w);
    let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.to_vec()).collect();
    for (t, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = model.params.tensors_mut()[t][k];
            model.params.tensors_mut()[t][k] = orig + reference::FD_STEP;
            let up = objective(&model);
            model.params.tensors_mut()[t][k] = orig - reference::FD_STEP;
            let dn = objective(&model);
            model.params.tensors_mut()[t][k] = orig;
            let num = (up - dn) / (2.0 * reference::FD_STEP);
            let rel = (grad[k] - num).abs() / grad[k].abs().max(num.abs()).max(reference::REL_FLOOR);
            assert!(rel < 1e-5, "tensor {t} index {k}: {} vs {num}", grad[k]);
        }
    }
}
