use super::*;
use crate::linalg::Matrix;
use crate::model::{
    backward, expand_head, feature_gradient_from_logits, forward, head_gradient,
    softmax_cross_entropy, Optimizer, OptimizerKind,
};
use crate::seeded_rng;

fn random_head(rng: &mut crate::Rng, n: usize, m: usize) -> ClassifierHead {
    expand_head(&ClassifierHead::new(n), &(0..m).collect::<Vec<_>>(), rng)
}

fn random_features(rng: &mut crate::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Gradient-definition oracle: sum over labels of
/// `p_y * (d log p_y / d f) (d log p_y / d f)^T`, with the analytic
/// log-softmax gradient `w_y - W p` computed by plain loops.
fn efm_gradient_oracle(features: &[f64], head: &ClassifierHead) -> Matrix {
    let n = head.feature_dim();
    let m = head.num_classes();
    let logits: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| features[i] * head.weights.get(i, j)).sum())
        .collect();
    let lse = log_sum_exp(&logits);
    let p: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    let wp: Vec<f64> = (0..n)
        .map(|i| (0..m).map(|j| head.weights.get(i, j) * p[j]).sum())
        .collect();
    let mut out = Matrix::zeros(n, n);
    for y in 0..m {
        let grad: Vec<f64> = (0..n).map(|i| head.weights.get(i, y) - wp[i]).collect();
        out.add_outer(p[y], &grad);
    }
    out
}

fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let mut diff = a.clone();
    diff.add_scaled(b, -1.0);
    diff.frobenius_norm() / b.frobenius_norm().max(1e-300)
}

/// Tiny supervised problem: `classes` Gaussian clusters in `input_dim`
/// dimensions, trained to high but unsaturated confidence (weight decay
/// keeps the logit margins moderate so the softmax stays smooth). Returns
/// the model, the training inputs and class labels.
fn train_toy_model(
    rng: &mut crate::Rng,
    classes: usize,
    input_dim: usize,
    feature_dim: usize,
    per_class: usize,
    epochs: usize,
) -> (FeatureExtractor, ClassifierHead, Matrix, Vec<usize>) {
    let mut inputs = Matrix::zeros(classes * per_class, input_dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..input_dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    for c in 0..classes {
        for s in 0..per_class {
            let r = c * per_class + s;
            let row = inputs.row_mut(r);
            for (i, v) in row.iter_mut().enumerate() {
                *v = means[c][i] + rng.sample::<f64, _>(StandardNormal) * 0.5;
            }
            labels.push(c);
        }
    }

    let mut extractor = FeatureExtractor::new(input_dim, &[16], feature_dim, rng);
    let mut head = random_head(rng, feature_dim, classes);
    let wd = 1e-2;
    let mut opt_backbone = Optimizer::new(OptimizerKind::adam(), 5e-3, wd, &extractor.param_shapes());
    let mut opt_head = Optimizer::new(OptimizerKind::adam(), 5e-3, wd, &[head.weights.data().len()]);
    for _ in 0..epochs {
        let cache = forward(&extractor, &head, &inputs).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&cache.logits, &labels, 0..classes).unwrap();
        let dw_head = head_gradient(cache.features(), &dlogits);
        let dfeat = feature_gradient_from_logits(&head, &dlogits);
        let grads = backward(&extractor, &cache.backbone, &dfeat).unwrap();
        let grad_slices = grads.slices();
        let mut params = extractor.param_slices_mut();
        opt_backbone.step(&mut params, &grad_slices);
        opt_head.step(&mut [head.weights.data_mut()], &[dw_head.data()]);
    }
    (extractor, head, inputs, labels)
}

#[test]
fn saturated_softmax_yields_zero_matrix() {
    let mut rng = seeded_rng(1, "efm");
    let n = 4;
    let mut head = random_head(&mut rng, n, 3);
    // Push the logit of class 1 to a huge margin: p becomes one-hot and
    // v_{y*} = W (e_{y*} - p) = 0.
    for i in 0..n {
        let w = head.weights.get(i, 1);
        head.weights.set(i, 1, w + 1e4);
    }
    let f: Vec<f64> = vec![1.0, 1.0, 1.0, 1.0];
    let e = local_efm(&f, &head);
    assert!(e.max_abs() < 1e-30, "max entry {}", e.max_abs());
}

#[test]
fn closed_form_matches_gradient_definition_oracle() {
    let mut rng = seeded_rng(2, "efm");
    for trial in 0..120 {
        let n = 2 + trial % 8;
        let m = 2 + trial % 5;
        let head = random_head(&mut rng, n, m);
        let f = random_features(&mut rng, n);
        let fast = local_efm(&f, &head);
        let oracle = efm_gradient_oracle(&f, &head);
        assert!(rel_frobenius(&fast, &oracle) <= 1e-10);
    }
}

#[test]
fn local_efm_rank_is_at_most_m_minus_one() {
    let mut rng = seeded_rng(3, "efm");
    let head = random_head(&mut rng, 4, 3);
    let f = random_features(&mut rng, 4);
    let e = local_efm(&f, &head);
    let eig = sym_eig(&e).unwrap();
    assert!(numerical_rank(&eig.eigenvalues, 1e-8) <= 2);
}

#[test]
fn dataset_efm_of_single_sample_equals_local() {
    let mut rng = seeded_rng(4, "efm");
    let extractor = FeatureExtractor::new(5, &[6], 4, &mut rng);
    let head = random_head(&mut rng, 4, 3);
    let input = Matrix::from_fn(1, 5, |_, _| rng.gen_range(-1.0..1.0));
    let e = dataset_efm(&extractor, &head, &input, 0).unwrap();
    let f = extractor.forward_features(&input).unwrap().features;
    let local = local_efm(f.row(0), &head);
    assert!(rel_frobenius(&e.matrix, &local) <= 1e-14);
    assert_eq!(e.sample_count, 1);
    assert_eq!(e.num_classes, 3);
}

#[test]
fn dataset_efm_is_invariant_under_duplication() {
    let mut rng = seeded_rng(5, "efm");
    let extractor = FeatureExtractor::new(4, &[5], 3, &mut rng);
    let head = random_head(&mut rng, 3, 4);
    let base = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
    let mut doubled = Matrix::zeros(12, 4);
    for r in 0..6 {
        doubled.row_mut(r).copy_from_slice(base.row(r));
        doubled.row_mut(r + 6).copy_from_slice(base.row(r));
    }
    let e1 = dataset_efm(&extractor, &head, &base, 0).unwrap();
    let e2 = dataset_efm(&extractor, &head, &doubled, 0).unwrap();
    assert!(rel_frobenius(&e1.matrix, &e2.matrix) <= 1e-12);
}

#[test]
fn dataset_efm_rejects_empty_input() {
    let mut rng = seeded_rng(6, "efm");
    let extractor = FeatureExtractor::new(4, &[], 3, &mut rng);
    let head = random_head(&mut rng, 3, 2);
    let empty = Matrix::zeros(0, 4);
    assert!(matches!(
        dataset_efm(&extractor, &head, &empty, 0),
        Err(CoreError::EmptyDataset)
    ));
}

#[test]
fn trained_five_class_model_has_rank_four() {
    let mut rng = seeded_rng(7, "efm");
    let (extractor, head, inputs, labels) = train_toy_model(&mut rng, 5, 8, 6, 40, 300);
    let cache = forward(&extractor, &head, &inputs).unwrap();
    let acc = accuracy_from_logits(&cache.logits, &head, &labels);
    assert!(acc >= 0.9, "toy model undertrained: {acc}");
    let e = dataset_efm(&extractor, &head, &inputs, 0).unwrap();
    let spectrum = spectrum_analysis(&e).unwrap();
    assert_eq!(spectrum.rank, 4);
    // The rank is stable across the whole tolerance window.
    for tol in [1e-6, 1e-8, 1e-10] {
        assert_eq!(spectrum_with_tol(&e, tol).unwrap().rank, 4);
    }
}

#[test]
fn kl_quadratic_zero_delta_is_zero() {
    let mut rng = seeded_rng(8, "kl");
    let head = random_head(&mut rng, 4, 3);
    let f = random_features(&mut rng, 4);
    let e = local_efm(&f, &head);
    assert_eq!(kl_quadratic(&e, &[0.0; 4]).unwrap(), 0.0);
    assert_eq!(directed_kl(&head, &f, &[0.0; 4]), 0.0);
}

#[test]
fn null_space_direction_is_exactly_invariant() {
    let mut rng = seeded_rng(9, "kl");
    // n > m so the head has a non-trivial null space.
    let n = 6;
    let head = random_head(&mut rng, n, 3);
    let f = random_features(&mut rng, n);
    let e = local_efm(&f, &head);
    let eig = sym_eig(&e).unwrap();
    let rank = numerical_rank(&eig.eigenvalues, 1e-8);
    assert!(rank < n);
    for idx in rank..n {
        let u = eig.eigenvectors.column(idx);
        // W^T u must be a constant vector: softmax shift invariance.
        let wu: Vec<f64> = (0..head.num_classes())
            .map(|j| (0..n).map(|i| u[i] * head.weights.get(i, j)).sum())
            .collect();
        let c = wu[0];
        for v in &wu {
            assert!((v - c).abs() <= 1e-10, "W^T u deviates from span(1): {wu:?}");
        }
        assert!(kl_quadratic(&e, &u).unwrap().abs() <= 1e-12);
        assert!(directed_kl(&head, &f, &u).abs() <= 1e-12);
    }
}

fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

#[test]
fn kl_residual_is_third_order() {
    let mut rng = seeded_rng(10, "kl");
    let (extractor, head, inputs, _) = train_toy_model(&mut rng, 4, 6, 5, 30, 200);
    let features = extractor.forward_features(&inputs).unwrap().features;
    for trial in 0..20 {
        let f = features.row(trial * 3).to_vec();
        let e = local_efm(&f, &head);
        let dir: Vec<f64> = {
            let raw: Vec<f64> = (0..f.len()).map(|_| rng.sample(StandardNormal)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            raw.iter().map(|v| v / norm).collect()
        };
        let scales = [1e-1, 1e-2, 1e-3, 1e-4];
        let mut residual_directed = Vec::new();
        let mut residual_symmetric = Vec::new();
        for &s in &scales {
            let delta: Vec<f64> = dir.iter().map(|d| d * s).collect();
            let quad = kl_quadratic(&e, &delta).unwrap();
            residual_directed.push((directed_kl(&head, &f, &delta) - 0.5 * quad).abs().max(1e-300));
            residual_symmetric.push((symmetric_kl(&head, &f, &delta) - quad).abs().max(1e-300));
        }
        let slope_d = log_log_slope(&scales, &residual_directed);
        let slope_s = log_log_slope(&scales, &residual_symmetric);
        assert!(slope_d >= 2.5, "trial {trial}: directed residual slope {slope_d}");
        assert!(slope_s >= 2.5, "trial {trial}: symmetric residual slope {slope_s}");
    }
}

#[test]
fn kl_residual_shrinks_eightfold_when_halved() {
    let mut rng = seeded_rng(11, "kl");
    let (extractor, head, inputs, _) = train_toy_model(&mut rng, 4, 6, 5, 30, 200);
    let features = extractor.forward_features(&inputs).unwrap().features;
    let f = features.row(0).to_vec();
    let e = local_efm(&f, &head);
    let dir: Vec<f64> = {
        let raw: Vec<f64> = (0..f.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.iter().map(|v| v / norm).collect()
    };
    let residual = |scale: f64| -> f64 {
        let delta: Vec<f64> = dir.iter().map(|d| d * scale).collect();
        let quad = kl_quadratic(&e, &delta).unwrap();
        (directed_kl(&head, &f, &delta) - 0.5 * quad).abs()
    };
    let r_full = residual(1e-2);
    let r_half = residual(5e-3);
    let ratio = r_full / r_half;
    assert!(
        (5.0..12.0).contains(&ratio),
        "cubic residual should shrink ~8x, got {ratio}"
    );
    // Bounded third-order coefficient.
    assert!(r_full / 1e-6 < 1e3);
}

#[test]
fn quadratic_form_is_twice_the_directed_kl_in_the_limit() {
    let mut rng = seeded_rng(12, "kl");
    let (extractor, head, inputs, _) = train_toy_model(&mut rng, 3, 5, 4, 30, 200);
    let features = extractor.forward_features(&inputs).unwrap().features;
    let f = features.row(5).to_vec();
    let e = local_efm(&f, &head);
    let dir: Vec<f64> = (0..f.len()).map(|_| rng.sample(StandardNormal)).collect();
    let delta: Vec<f64> = dir.iter().map(|d| d * 1e-4).collect();
    let quad = kl_quadratic(&e, &delta).unwrap();
    let kl = directed_kl(&head, &f, &delta);
    if quad > 1e-20 {
        let ratio = quad / kl;
        assert!((ratio - 2.0).abs() < 1e-2, "quad/KL = {ratio}");
    }
}

#[test]
fn spectrum_of_zero_matrix_has_rank_zero() {
    let efm = EmpiricalFeatureMatrix {
        matrix: Matrix::zeros(5, 5),
        task_index: 0,
        num_classes: 1,
        sample_count: 1,
    };
    let s = spectrum_analysis(&efm).unwrap();
    assert_eq!(s.rank, 0);
    for w in s.eigenvalues.windows(2) {
        assert!(w[0] >= w[1]);
    }
}

#[test]
fn spectrum_eigenvalues_are_non_increasing() {
    let mut rng = seeded_rng(13, "efm");
    let extractor = FeatureExtractor::new(6, &[8], 5, &mut rng);
    let head = random_head(&mut rng, 5, 4);
    let inputs = Matrix::from_fn(20, 6, |_, _| rng.gen_range(-1.0..1.0));
    let e = dataset_efm(&extractor, &head, &inputs, 0).unwrap();
    let s = spectrum_analysis(&e).unwrap();
    for w in s.eigenvalues.windows(2) {
        assert!(w[0] >= w[1]);
    }
    // PSD: smallest eigenvalue within clamp tolerance.
    assert!(*s.eigenvalues.last().unwrap() >= -1e-9);
}

#[test]
fn perturbation_zero_scale_changes_nothing() {
    let mut rng = seeded_rng(14, "pert");
    let (extractor, head, inputs, labels) = train_toy_model(&mut rng, 3, 5, 4, 20, 150);
    let e = dataset_efm(&extractor, &head, &inputs, 0).unwrap();
    let mut opts = PerturbationOptions::new(PerturbMode::Principal);
    opts.noise_scale = Some(0.0);
    let mut prng = seeded_rng(0, "pert-noise");
    let rep = perturbation_report(&extractor, &head, &e, &inputs, &labels, &opts, &mut prng).unwrap();
    assert_eq!(rep.max_abs_softmax_dev, 0.0);
    assert_eq!(rep.accuracy_base, rep.accuracy_perturbed);
}

#[test]
fn non_principal_perturbations_leave_outputs_unchanged() {
    let mut rng = seeded_rng(15, "pert");
    // feature_dim 8 > classes 4 ensures a non-empty null space.
    let (extractor, head, inputs, labels) = train_toy_model(&mut rng, 4, 6, 8, 30, 250);
    let e = dataset_efm(&extractor, &head, &inputs, 0).unwrap();
    let opts = PerturbationOptions::new(PerturbMode::NonPrincipal);
    let mut prng = seeded_rng(1, "pert-noise");
    let rep = perturbation_report(&extractor, &head, &e, &inputs, &labels, &opts, &mut prng).unwrap();
    assert!(
        rep.max_abs_softmax_dev <= 1e-10,
        "null-space perturbation leaked: {}",
        rep.max_abs_softmax_dev
    );
}

#[test]
fn principal_perturbations_disturb_outputs_at_matched_norm() {
    let mut rng = seeded_rng(16, "pert");
    let (extractor, head, inputs, labels) = train_toy_model(&mut rng, 4, 6, 8, 30, 250);
    let e = dataset_efm(&extractor, &head, &inputs, 0).unwrap();
    let norm = 1.0;
    let mut principal = PerturbationOptions::new(PerturbMode::Principal);
    principal.target_norm = Some(norm);
    let mut non_principal = PerturbationOptions::new(PerturbMode::NonPrincipal);
    non_principal.target_norm = Some(norm);

    let mut prng = seeded_rng(2, "pert-noise");
    let rep_p =
        perturbation_report(&extractor, &head, &e, &inputs, &labels, &principal, &mut prng).unwrap();
    let mut prng = seeded_rng(2, "pert-noise");
    let rep_n =
        perturbation_report(&extractor, &head, &e, &inputs, &labels, &non_principal, &mut prng)
            .unwrap();
    assert!(rep_p.mean_abs_softmax_dev > 1e-3);
    assert!(rep_n.max_abs_softmax_dev <= 1e-10);
}

#[test]
fn principal_mode_on_rank_zero_matrix_errors() {
    let mut rng = seeded_rng(17, "pert");
    let extractor = FeatureExtractor::new(4, &[], 3, &mut rng);
    let head = random_head(&mut rng, 3, 2);
    let efm = EmpiricalFeatureMatrix {
        matrix: Matrix::zeros(3, 3),
        task_index: 0,
        num_classes: 2,
        sample_count: 1,
    };
    let inputs = Matrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0));
    let opts = PerturbationOptions::new(PerturbMode::Principal);
    let mut prng = seeded_rng(3, "noise");
    let r = perturbation_report(&extractor, &head, &efm, &inputs, &[0, 1], &opts, &mut prng);
    assert!(r.is_err());
}
