use super::*;
use crate::model::{Classifier, InputShape};
use crate::rng::{substream, Stream};
use approx::assert_abs_diff_eq;
use ndarray::ArrayD;

fn init_rng(seed: u64) -> ChaCha8Rng {
    substream(seed, Stream::Init, &[0])
}

fn random_inputs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = substream(seed, Stream::Data, &[1]);
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(0.2..0.8))
}

fn small_mlp(seed: u64, dim: usize, classes: usize) -> Classifier {
    Classifier::new("mlp:1x8", InputShape::flat(dim), classes, &mut init_rng(seed)).unwrap()
}

/// Linear two-class model: positive-class probability `sigmoid(w . x + b)`.
fn logistic_model(w: &[f64], b: f64) -> Classifier {
    let d = w.len();
    let mut model = Classifier::new("linear", InputShape::flat(d), 2, &mut init_rng(0)).unwrap();
    let mut weight = ArrayD::zeros(vec![2, d]);
    for (j, &wj) in w.iter().enumerate() {
        weight[[1, j]] = wj;
    }
    let mut bias = ArrayD::zeros(vec![2]);
    bias[1] = b;
    model.set_param_arrays(&[weight, bias]).unwrap();
    model
}

#[test]
fn fgsm_matches_logistic_closed_form() {
    let model = logistic_model(&[1.0, -1.0], 0.0);
    let x = Array2::from_shape_vec((1, 2), vec![0.5, 0.5]).unwrap();
    let adv = fgsm(&model, &x, &[1], 0.1, InnerLoss::Ce).unwrap();
    assert_abs_diff_eq!(adv.x_adv[[0, 0]], 0.4, epsilon = 1e-12);
    assert_abs_diff_eq!(adv.x_adv[[0, 1]], 0.6, epsilon = 1e-12);
}

#[test]
fn fgsm_on_zero_gradient_model_is_identity() {
    let mut model = small_mlp(5, 3, 2);
    let mut params = model.param_arrays();
    let n = params.len();
    params[n - 2].fill(0.0);
    params[n - 1].fill(0.0);
    model.set_param_arrays(&params).unwrap();
    let x = random_inputs(4, 3, 6);
    let adv = fgsm(&model, &x, &[0, 1, 0, 1], 0.1, InnerLoss::BoostedCe).unwrap();
    assert_eq!(adv.x_adv, x);
}

#[test]
fn fgsm_equals_single_step_pgd_bitwise() {
    let model = small_mlp(7, 4, 3);
    let x = random_inputs(5, 4, 8);
    let y = vec![0, 1, 2, 0, 1];
    let adv_fgsm = fgsm(&model, &x, &y, 0.05, InnerLoss::BoostedCe).unwrap();
    let spec = PerturbationSpec {
        norm: NormKind::Linf,
        eps: 0.05,
        step_size: 0.05,
        steps: 1,
        restarts: 1,
        init: InitMode::Zero,
        inner_loss: InnerLoss::BoostedCe,
    };
    let adv_pgd = pgd_attack(&model, &x, &y, &spec, 0).unwrap();
    assert_eq!(adv_fgsm.x_adv, adv_pgd.x_adv);
    assert_eq!(adv_fgsm.delta, adv_pgd.delta);
}

#[test]
fn pgd_with_vanishing_budget_returns_clean_inputs() {
    let model = small_mlp(9, 3, 2);
    let x = random_inputs(6, 3, 10);
    let y = vec![0, 1, 0, 1, 0, 1];
    let spec = PerturbationSpec::new(NormKind::Linf, 1e-9, 1e-9, 5);
    let adv = pgd_attack(&model, &x, &y, &spec, 3).unwrap();
    for (a, b) in adv.x_adv.iter().zip(x.iter()) {
        assert!((a - b).abs() <= 1e-8);
    }
    assert_eq!(model.predict(&adv.x_adv).unwrap(), model.predict(&x).unwrap());
}

// Closed-form worst case for a linear logistic model: the optimal l-inf
// perturbation moves every coordinate to the budget corner against the label.
#[test]
fn pgd_reaches_linear_model_worst_case() {
    let w = [1.4, -0.9, 0.3];
    let model = logistic_model(&w, 0.1);
    let x = random_inputs(8, 3, 11);
    let y = vec![1usize, 0, 1, 0, 1, 0, 1, 0];
    let eps = 0.1;

    let spec = PerturbationSpec {
        norm: NormKind::Linf,
        eps,
        step_size: eps / 4.0,
        steps: 10,
        restarts: 1,
        init: InitMode::Zero,
        inner_loss: InnerLoss::Ce,
    };
    let adv = pgd_attack(&model, &x, &y, &spec, 12).unwrap();

    let mut worst = x.clone();
    for (i, mut row) in worst.rows_mut().into_iter().enumerate() {
        let toward = if y[i] == 1 { -1.0 } else { 1.0 };
        for (v, &wj) in row.iter_mut().zip(w.iter()) {
            *v += eps * toward * wj.signum();
        }
    }
    let worst_losses = InnerLoss::Ce
        .per_example(&model.forward_probs(&worst).unwrap(), &y)
        .unwrap();
    for (got, want) in adv.final_loss.iter().zip(&worst_losses) {
        assert!((got - want).abs() <= 1e-4, "pgd loss {got} vs analytic worst {want}");
    }
}

// Convex inner problem: the per-step loss trajectory is non-decreasing, so
// the final loss is monotone in the step count.
#[test]
fn pgd_loss_monotone_in_steps_on_linear_model() {
    let model = logistic_model(&[0.9, 0.7], -0.2);
    let x = random_inputs(5, 2, 13);
    let y = vec![1, 0, 1, 0, 1];
    let mut prev = vec![f64::NEG_INFINITY; 5];
    for steps in 1..=6 {
        let spec = PerturbationSpec {
            norm: NormKind::Linf,
            eps: 0.15,
            step_size: 0.02,
            steps,
            restarts: 1,
            init: InitMode::Zero,
            inner_loss: InnerLoss::Ce,
        };
        let adv = pgd_attack(&model, &x, &y, &spec, 14).unwrap();
        for (cur, p) in adv.final_loss.iter().zip(&prev) {
            assert!(cur + 1e-12 >= *p);
        }
        prev = adv.final_loss;
    }
}

#[test]
fn pgd_max_loss_monotone_in_restarts() {
    let model = small_mlp(15, 4, 3);
    let x = random_inputs(10, 4, 16);
    let y = vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
    let mut prev = vec![f64::NEG_INFINITY; 10];
    for restarts in [1usize, 2, 4, 8] {
        let spec = PerturbationSpec::new(NormKind::L2, 0.3, 0.1, 5).with_restarts(restarts);
        let adv = pgd_attack(&model, &x, &y, &spec, 99).unwrap();
        for (cur, p) in adv.max_inner_loss.iter().zip(&prev) {
            assert!(cur + 1e-12 >= *p, "max loss dropped when adding restarts");
        }
        prev = adv.max_inner_loss;
    }
}

#[test]
fn pgd_is_deterministic_given_seed() {
    let model = small_mlp(17, 4, 2);
    let x = random_inputs(6, 4, 18);
    let y = vec![0, 1, 0, 1, 0, 1];
    let spec = PerturbationSpec::new(NormKind::Linf, 0.1, 0.02, 7).with_restarts(3);
    let a = pgd_attack(&model, &x, &y, &spec, 5).unwrap();
    let b = pgd_attack(&model, &x, &y, &spec, 5).unwrap();
    assert_eq!(a.x_adv, b.x_adv);
    assert_eq!(a.best_restart, b.best_restart);
}

#[test]
fn attack_outputs_respect_budget_and_range() {
    let model = small_mlp(19, 5, 3);
    let x = random_inputs(8, 5, 20);
    let y = vec![0, 1, 2, 0, 1, 2, 0, 1];
    for norm in [NormKind::Linf, NormKind::L2, NormKind::L1] {
        let spec = PerturbationSpec::new(norm, 0.4, 0.15, 6).with_restarts(2);
        let adv = pgd_attack(&model, &x, &y, &spec, 21).unwrap();
        adv.check_budget(norm, 0.4).unwrap();
    }
}

#[test]
fn mim_zero_decay_equals_pgd_bitwise() {
    let model = small_mlp(23, 4, 3);
    let x = random_inputs(6, 4, 24);
    let y = vec![0, 1, 2, 0, 1, 2];
    let spec = PerturbationSpec::new(NormKind::Linf, 0.08, 0.02, 6).with_restarts(2);
    let a = mim_attack(&model, &x, &y, &spec, 0.0, 31).unwrap();
    let b = pgd_attack(&model, &x, &y, &spec, 31).unwrap();
    assert_eq!(a.x_adv, b.x_adv);
}

#[test]
fn mim_single_step_equals_fgsm() {
    let model = small_mlp(25, 3, 2);
    let x = random_inputs(4, 3, 26);
    let y = vec![0, 1, 0, 1];
    let eps = 0.07;
    let spec = PerturbationSpec {
        norm: NormKind::Linf,
        eps,
        step_size: eps,
        steps: 1,
        restarts: 1,
        init: InitMode::Zero,
        inner_loss: InnerLoss::BoostedCe,
    };
    for decay in [0.0, 0.5, 1.0] {
        let a = mim_attack(&model, &x, &y, &spec, decay, 0).unwrap();
        let b = fgsm(&model, &x, &y, eps, InnerLoss::BoostedCe).unwrap();
        assert_eq!(a.x_adv, b.x_adv, "decay {decay}");
    }
}

// Independent re-implementation of the momentum recurrence.
#[test]
fn mim_matches_reference_recurrence() {
    let model = small_mlp(27, 3, 2);
    let x = random_inputs(3, 3, 28);
    let y = vec![0, 1, 0];
    let (eps, eta, decay) = (0.1, 0.03, 1.0);
    let spec = PerturbationSpec {
        norm: NormKind::Linf,
        eps,
        step_size: eta,
        steps: 3,
        restarts: 1,
        init: InitMode::Zero,
        inner_loss: InnerLoss::BoostedCe,
    };
    let got = mim_attack(&model, &x, &y, &spec, decay, 0).unwrap();

    let mut x_cur = x.clone();
    let mut acc = Array2::<f64>::zeros(x.raw_dim());
    for _ in 0..3 {
        let g = crate::model::input_gradient(&model, &InnerLoss::BoostedCe, &x_cur, &y).unwrap();
        for i in 0..x.nrows() {
            let l1: f64 = g.row(i).iter().map(|v| v.abs()).sum();
            for j in 0..x.ncols() {
                let nrm = if l1 > 0.0 { g[[i, j]] / l1 } else { 0.0 };
                acc[[i, j]] = decay * acc[[i, j]] + nrm;
            }
        }
        let mut delta = Array2::<f64>::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let s = acc[[i, j]];
                let step = if s > 0.0 { eta } else if s < 0.0 { -eta } else { 0.0 };
                delta[[i, j]] = (x_cur[[i, j]] + step - x[[i, j]]).clamp(-eps, eps);
            }
        }
        x_cur = (&x + &delta).mapv(|v| v.clamp(0.0, 1.0));
    }
    for (a, b) in got.x_adv.iter().zip(x_cur.iter()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn mim_rejects_non_linf_norms() {
    let model = small_mlp(29, 3, 2);
    let x = random_inputs(2, 3, 30);
    let spec = PerturbationSpec::new(NormKind::L2, 0.1, 0.05, 3);
    assert!(matches!(
        mim_attack(&model, &x, &[0, 1], &spec, 0.9, 0),
        Err(MatError::Config(_))
    ));
}

fn msd_budgets(eps: (f64, f64, f64), steps: usize) -> MsdBudgets {
    MsdBudgets {
        linf: PerturbationSpec::new(NormKind::Linf, eps.0, eps.0 / 4.0, steps)
            .with_init(InitMode::Zero),
        l2: PerturbationSpec::new(NormKind::L2, eps.1, eps.1 / 4.0, steps).with_init(InitMode::Zero),
        l1: PerturbationSpec::new(NormKind::L1, eps.2, eps.2 / 4.0, steps).with_init(InitMode::Zero),
    }
}

#[test]
fn candidate_selection_prefers_earlier_norms_on_ties() {
    let a = Array2::from_elem((2, 2), 1.0);
    let b = Array2::from_elem((2, 2), 2.0);
    let c = Array2::from_elem((2, 2), 3.0);
    let (chosen_x, chosen) = select_candidate_rows(vec![
        (a, vec![0.5, 1.0]),
        (b, vec![0.5, 2.0]),
        (c, vec![0.5, 2.0]),
    ]);
    assert_eq!(chosen, vec![0, 1]);
    assert_eq!(chosen_x.row(0).to_vec(), vec![1.0, 1.0]);
    assert_eq!(chosen_x.row(1).to_vec(), vec![2.0, 2.0]);
}

#[test]
fn msd_with_degenerate_small_budgets_tracks_pgd_linf() {
    let model = logistic_model(&[1.1, -0.6], 0.0);
    let x = random_inputs(4, 2, 32);
    let y = vec![1, 0, 1, 0];
    let budgets = msd_budgets((0.2, 1e-9, 1e-9), 4);
    let got = msd_attack(&model, &x, &y, &budgets, 7).unwrap();
    let pgd = pgd_attack(&model, &x, &y, &budgets.linf, 7).unwrap();
    assert_eq!(got.x_adv, pgd.x_adv);
}

// Greedy-reference oracle on a two-pixel input: at every step, simulate all
// three candidates and take the per-step winner; also check the winner
// dominates the alternatives.
#[test]
fn msd_matches_exhaustive_per_step_selection() {
    let model = small_mlp(33, 2, 2);
    let x = random_inputs(1, 2, 34);
    let y = vec![1usize];
    let budgets = msd_budgets((0.12, 0.2, 0.3), 2);
    let got = msd_attack(&model, &x, &y, &budgets, 0).unwrap();

    let specs = [budgets.linf, budgets.l2, budgets.l1];
    let loss_of = |xq: &Array2<f64>| -> f64 {
        InnerLoss::BoostedCe
            .per_example(&model.forward_probs(xq).unwrap(), &y)
            .unwrap()[0]
    };
    let mut x_cur = x.clone();
    for _ in 0..2 {
        let g = crate::model::input_gradient(&model, &InnerLoss::BoostedCe, &x_cur, &y).unwrap();
        let mut best: Option<(f64, Array2<f64>)> = None;
        for spec in &specs {
            let step = step_direction(&g, spec.norm, spec.step_size);
            let cand = project_and_clip(&x, &x_cur + &step, spec.norm, spec.eps);
            let l = loss_of(&cand);
            if best.as_ref().map_or(true, |(bl, _)| l > *bl) {
                best = Some((l, cand));
            }
        }
        x_cur = best.unwrap().1;
    }
    for (a, b) in got.x_adv.iter().zip(x_cur.iter()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn msd_rejects_mismatched_step_counts() {
    let model = small_mlp(35, 2, 2);
    let x = random_inputs(2, 2, 36);
    let mut budgets = msd_budgets((0.1, 0.2, 0.3), 3);
    budgets.l1.steps = 5;
    assert!(matches!(
        msd_attack(&model, &x, &[0, 1], &budgets, 0),
        Err(MatError::Config(_))
    ));
}

#[test]
fn noise_with_vanishing_budget_keeps_accuracy() {
    let model = small_mlp(37, 4, 2);
    let x = random_inputs(20, 4, 38);
    let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let clean_acc = model.accuracy(&x, &y).unwrap();
    for kind in [NoiseKind::GaussianL2, NoiseKind::SaltPepperL1] {
        let adv = noise_attack(&model, &x, &y, kind, 1e-9, 3, InnerLoss::BoostedCe, 40).unwrap();
        assert_abs_diff_eq!(model.accuracy(&adv.x_adv, &y).unwrap(), clean_acc, epsilon = 1e-12);
    }
}

#[test]
fn salt_pepper_entries_are_original_or_saturated() {
    let model = small_mlp(41, 6, 2);
    let x = random_inputs(5, 6, 42);
    let y = vec![0, 1, 0, 1, 0];
    let adv = noise_attack(&model, &x, &y, NoiseKind::SaltPepperL1, 1.5, 4, InnerLoss::BoostedCe, 43)
        .unwrap();
    for (a, o) in adv.x_adv.iter().zip(x.iter()) {
        assert!(*a == *o || *a == 0.0 || *a == 1.0, "entry {a} from {o}");
    }
    adv.check_budget(NormKind::L1, 1.5).unwrap();
}

#[test]
fn noise_rejects_zero_trials() {
    let model = small_mlp(44, 3, 2);
    let x = random_inputs(2, 3, 45);
    assert!(matches!(
        noise_attack(&model, &x, &[0, 1], NoiseKind::GaussianL2, 0.1, 0, InnerLoss::Ce, 0),
        Err(MatError::Config(_))
    ));
}

#[test]
fn gaussian_noise_respects_l2_budget() {
    let model = small_mlp(46, 5, 3);
    let x = random_inputs(6, 5, 47);
    let y = vec![0, 1, 2, 0, 1, 2];
    let adv = noise_attack(&model, &x, &y, NoiseKind::GaussianL2, 0.25, 5, InnerLoss::BoostedCe, 48)
        .unwrap();
    adv.check_budget(NormKind::L2, 0.25).unwrap();
}
