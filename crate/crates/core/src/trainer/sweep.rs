//! Trade-off sweep: train a fresh pair per alpha on a seeded train/val split
//! and record clean plus robust validation accuracy.

use serde::{Deserialize, Serialize};

use super::{train_mat, Cohort, TrainConfig};
use crate::attacks::{pgd_attack, PerturbationSpec};
use crate::data::Dataset;
use crate::error::{MatError, Result};
use crate::rng::{fold_key, Stream};

/// One grid point of an alpha sweep; accuracies are cohort means with the
/// per-model values alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub per_model_clean: Vec<f64>,
    pub per_model_robust: Vec<f64>,
}

/// The 20-step validation attack used to score a sweep, derived from the
/// training budget.
pub fn sweep_eval_attack(train_attack: &PerturbationSpec) -> PerturbationSpec {
    PerturbationSpec::pgd_linf(train_attack.eps, 20).with_inner_loss(train_attack.inner_loss)
}

/// For each alpha: split 80/20 (seeded), train a two-network cohort from a
/// fresh seeded initialization, and evaluate clean and PGD-20 accuracy on the
/// validation split.
pub fn alpha_sweep(
    arch: &str,
    data: &Dataset,
    alphas: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(MatError::Config("alpha sweep needs a non-empty grid".into()));
    }
    cfg.validate()?;
    let splits = data.split_fractions(&[0.8, 0.2], cfg.seed)?;
    let (train, val) = (&splits[0], &splits[1]);
    let eval_spec = sweep_eval_attack(&cfg.attack);

    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut run_cfg = cfg.clone();
        run_cfg.weights.alpha = alpha;
        run_cfg.weights.validate()?;
        let mut cohort = Cohort::peers(
            arch,
            data.shape,
            data.num_classes,
            &cfg.optim,
            cfg.seed,
            2,
        )?;
        train_mat(&mut cohort, train, &run_cfg)?;

        let mut per_model_clean = Vec::with_capacity(2);
        let mut per_model_robust = Vec::with_capacity(2);
        for member in &cohort.members {
            per_model_clean.push(member.model.accuracy(&val.inputs, &val.labels)?);
            let seed = fold_key(cfg.seed, Stream::Eval, &[alpha.to_bits()]);
            let adv = pgd_attack(&member.model, &val.inputs, &val.labels, &eval_spec, seed)?;
            per_model_robust.push(member.model.accuracy(&adv.x_adv, &val.labels)?);
        }
        rows.push(SweepRow {
            alpha,
            clean_accuracy: per_model_clean.iter().sum::<f64>() / 2.0,
            robust_accuracy: per_model_robust.iter().sum::<f64>() / 2.0,
            per_model_clean,
            per_model_robust,
        });
    }
    Ok(rows)
}
