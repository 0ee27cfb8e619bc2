//! Multi-perturbation training: the specialist/generalist ensemble plus the
//! single-model baselines it is measured against.

use std::time::Instant;

use ndarray::{Array2, ArrayD};

use super::{
    abort_on_nonfinite, accumulate_grads, epoch_batches, member_attack_inputs, write_checkpoints,
    Cohort, MpStrategy, RunManifest, TrainConfig,
};
use crate::attacks::{msd_attack, pgd_attack, MsdBudgets, NormKind, PerturbationSpec};
use crate::data::Dataset;
use crate::error::{MatError, Result};
use crate::losses::{
    generalist_avg_with_grads, generalist_max_with_grads, generalist_msd_with_grads, matmp_total,
    specialist_loss_with_grads, InnerLoss, LossWeights,
};
use crate::model::{sgd_step, Classifier, ForwardTrace, OptimState, ProbBatch};
use crate::rng::{fold_key, Stream};

/// Assemble the three-norm budgets for MSD from the specialists' attacks.
fn msd_budgets_from(specs: &[PerturbationSpec]) -> Result<MsdBudgets> {
    let find = |norm: NormKind| -> Result<PerturbationSpec> {
        specs
            .iter()
            .find(|s| s.norm == norm)
            .copied()
            .ok_or_else(|| {
                MatError::Config(format!(
                    "msd strategy needs a specialist for the {} norm",
                    norm.label()
                ))
            })
    };
    if specs.len() != 3 {
        return Err(MatError::Config(format!(
            "msd strategy needs exactly the three norm specialists, got {}",
            specs.len()
        )));
    }
    let budgets = MsdBudgets {
        linf: find(NormKind::Linf)?,
        l2: find(NormKind::L2)?,
        l1: find(NormKind::L1)?,
    };
    budgets.validate()?;
    Ok(budgets)
}

/// Train a generalist-plus-specialists ensemble. Member 0 is the generalist;
/// every specialist attacks with its own bound perturbation type, the
/// generalist sees per-strategy adversarial inputs, and all networks update
/// jointly from the summed objective.
pub fn train_mat_mp(cohort: &mut Cohort, data: &Dataset, cfg: &TrainConfig) -> Result<RunManifest> {
    cfg.validate()?;
    cohort.validate()?;
    if data.is_empty() {
        return Err(MatError::Config("training dataset is empty".into()));
    }
    let m_count = cohort.members.len().saturating_sub(1);
    if m_count < 1 || !matches!(cohort.members[0].role, super::Role::Generalist) {
        return Err(MatError::Config(
            "multi-perturbation training needs a generalist at index 0 plus specialists".into(),
        ));
    }
    if cfg.strategy == MpStrategy::None {
        return Err(MatError::Config(
            "a generalist is present but no training strategy is set".into(),
        ));
    }
    let specs: Vec<PerturbationSpec> = cohort.members[1..]
        .iter()
        .map(|m| m.attack.expect("validated: specialists bind attacks"))
        .collect();
    let msd = if cfg.strategy == MpStrategy::Msd {
        Some(msd_budgets_from(&specs)?)
    } else {
        None
    };

    let start = Instant::now();
    let total_members = cohort.members.len();
    let mut manifest = RunManifest::new(cfg, cohort.members.iter().map(|m| m.name.clone()).collect())?;
    manifest.step_losses = vec![Vec::new(); total_members];

    for epoch in 1..=cfg.epochs {
        let mut epoch_total = 0.0;
        let mut epoch_member = vec![0.0; total_members];
        let batches = epoch_batches(data, cfg, epoch)?;
        let batch_count = batches.len();
        for (b, (x, y)) in batches.into_iter().enumerate() {
            // Specialist adversarial inputs, against fixed parameters.
            let mut spec_adv = Vec::with_capacity(m_count);
            for i in 1..=m_count {
                spec_adv.push(member_attack_inputs(
                    &cohort.members[i],
                    cfg,
                    &x,
                    &y,
                    epoch,
                    b,
                    i,
                    0,
                )?);
            }
            // Generalist adversarial inputs per strategy.
            let generalist = &cohort.members[0].model;
            let gen_adv: Vec<Array2<f64>> = match cfg.strategy {
                MpStrategy::Msd => {
                    let seed = fold_key(cfg.seed, Stream::Attack, &[epoch as u64, b as u64, 0, 0]);
                    vec![msd_attack(generalist, &x, &y, msd.as_ref().unwrap(), seed)?.x_adv]
                }
                _ => {
                    let mut all = Vec::with_capacity(m_count);
                    for (m, spec) in specs.iter().enumerate() {
                        let seed = fold_key(
                            cfg.seed,
                            Stream::Attack,
                            &[epoch as u64, b as u64, 0, m as u64 + 1],
                        );
                        all.push(pgd_attack(generalist, &x, &y, spec, seed)?.x_adv);
                    }
                    all
                }
            };

            // Forward passes: clean for everyone, adversarial as needed.
            let clean_traces: Vec<ForwardTrace> = cohort
                .members
                .iter()
                .map(|m| m.model.forward_trace(&x))
                .collect::<Result<_>>()?;
            let clean_probs: Vec<ProbBatch> = clean_traces.iter().map(ForwardTrace::probs).collect();
            let spec_adv_traces: Vec<ForwardTrace> = spec_adv
                .iter()
                .enumerate()
                .map(|(m, adv)| cohort.members[m + 1].model.forward_trace(adv))
                .collect::<Result<_>>()?;
            let gen_adv_traces: Vec<ForwardTrace> = gen_adv
                .iter()
                .map(|adv| generalist.forward_trace(adv))
                .collect::<Result<_>>()?;
            let gen_adv_probs: Vec<ProbBatch> = gen_adv_traces.iter().map(ForwardTrace::probs).collect();
            let specialist_clean: Vec<ProbBatch> = clean_probs[1..].to_vec();

            // Pending clean-side (teacher) gradients per member.
            let mut d_clean_pending: Vec<Array2<f64>> = clean_probs
                .iter()
                .map(|p| Array2::zeros(p.values().raw_dim()))
                .collect();
            let mut member_losses = vec![0.0; total_members];
            let mut grad_work: Vec<Vec<ArrayD<f64>>> = vec![Vec::new(); total_members];

            // Specialist objectives.
            for m in 1..=m_count {
                let mut peer_indices: Vec<usize> = (1..=m_count).filter(|&i| i != m).collect();
                if cfg.mp_peers_include_generalist {
                    peer_indices.push(0);
                }
                if peer_indices.is_empty() {
                    // Degenerate single-specialist ensemble: distill from the
                    // generalist to keep the peer set non-empty.
                    peer_indices.push(0);
                }
                let peers: Vec<ProbBatch> =
                    peer_indices.iter().map(|&i| clean_probs[i].clone()).collect();
                let adv_probs = spec_adv_traces[m - 1].probs();
                let (loss, d_adv, d_peers) =
                    specialist_loss_with_grads(&adv_probs, &peers, &y, &cfg.weights, m_count)?;
                member_losses[m] = loss;
                let (pg, _) = cohort.members[m].model.backward(&spec_adv_traces[m - 1], &d_adv)?;
                accumulate_grads(&mut grad_work[m], pg);
                for (&peer_idx, d_peer) in peer_indices.iter().zip(d_peers) {
                    d_clean_pending[peer_idx] += &d_peer;
                }
            }

            // Generalist objective.
            let (gen_loss, gen_pass_grads, d_teachers) = match cfg.strategy {
                MpStrategy::Avg => {
                    let (loss, d_adv, d_clean) =
                        generalist_avg_with_grads(&gen_adv_probs, &specialist_clean, &y, &cfg.weights)?;
                    (loss, d_adv.into_iter().enumerate().collect::<Vec<_>>(), d_clean)
                }
                MpStrategy::Max => {
                    let (loss, k, d_adv, d_clean) =
                        generalist_max_with_grads(&gen_adv_probs, &specialist_clean, &y, &cfg.weights)?;
                    let mut teachers: Vec<Array2<f64>> = specialist_clean
                        .iter()
                        .map(|p| Array2::zeros(p.values().raw_dim()))
                        .collect();
                    teachers[k] = d_clean;
                    (loss, vec![(k, d_adv)], teachers)
                }
                MpStrategy::Msd => {
                    let (loss, d_adv, d_clean) = generalist_msd_with_grads(
                        &gen_adv_probs[0],
                        &specialist_clean,
                        &y,
                        &cfg.weights,
                    )?;
                    (loss, vec![(0usize, d_adv)], d_clean)
                }
                MpStrategy::None => unreachable!("validated above"),
            };
            member_losses[0] = gen_loss;
            for (pass, d_adv) in gen_pass_grads {
                let (pg, _) = generalist.backward(&gen_adv_traces[pass], &d_adv)?;
                accumulate_grads(&mut grad_work[0], pg);
            }
            for (m, d_teacher) in d_teachers.into_iter().enumerate() {
                d_clean_pending[m + 1] += &d_teacher;
            }

            // Teacher-side gradients through each member's clean pass.
            for i in 0..total_members {
                if d_clean_pending[i].iter().any(|&v| v != 0.0) {
                    let (pg, _) = cohort.members[i].model.backward(&clean_traces[i], &d_clean_pending[i])?;
                    accumulate_grads(&mut grad_work[i], pg);
                }
            }

            let total = matmp_total(&member_losses[1..], member_losses[0]);
            abort_on_nonfinite(total, cohort, cfg, epoch, "multi-perturbation loss")?;

            for (i, grads) in grad_work.into_iter().enumerate() {
                manifest.step_losses[i].push(member_losses[i]);
                epoch_member[i] += member_losses[i] / batch_count as f64;
                let member = &mut cohort.members[i];
                if member.trainable && !grads.is_empty() {
                    sgd_step(&mut member.model, &mut member.optim, &grads, epoch)?;
                }
            }
            manifest.step_totals.push(total);
            epoch_total += total / batch_count as f64;
        }

        let clean_accuracy = cohort
            .members
            .iter()
            .map(|m| m.model.accuracy(&data.inputs, &data.labels))
            .collect::<Result<Vec<_>>>()?;
        manifest.curves.push(super::EpochStats {
            epoch,
            total_loss: epoch_total,
            member_at: epoch_member.clone(),
            member_kd: vec![0.0; total_members],
            clean_accuracy,
        });
    }
    write_checkpoints(cohort, cfg, cfg.epochs, &mut manifest, None)?;
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(manifest)
}

/// Single-model adversarial-training baseline over one or more perturbation
/// types: AVG trains on every attack each step, MAX on the worst one, MSD on
/// multi-steepest-descent examples. Random streams match the generalist's in
/// [`train_mat_mp`], so a zero-distillation ensemble run reproduces these
/// baselines step for step.
pub fn train_at_multi(
    model: &mut Classifier,
    optim: &mut OptimState,
    specs: &[PerturbationSpec],
    strategy: MpStrategy,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunManifest> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(MatError::Config("baseline training needs at least one attack".into()));
    }
    if data.is_empty() {
        return Err(MatError::Config("training dataset is empty".into()));
    }
    let msd = if strategy == MpStrategy::Msd {
        Some(msd_budgets_from(specs)?)
    } else {
        None
    };
    let zero_kd = LossWeights {
        alpha: 0.0,
        detach_teacher: false,
        cohort_divisor: cfg.weights.cohort_divisor,
    };

    let start = Instant::now();
    let mut manifest = RunManifest::new(cfg, vec!["baseline".to_string()])?;
    manifest.step_losses = vec![Vec::new()];

    for epoch in 1..=cfg.epochs {
        let mut epoch_total = 0.0;
        let batches = epoch_batches(data, cfg, epoch)?;
        let batch_count = batches.len();
        for (b, (x, y)) in batches.into_iter().enumerate() {
            let adv: Vec<Array2<f64>> = match strategy {
                MpStrategy::Msd => {
                    let seed = fold_key(cfg.seed, Stream::Attack, &[epoch as u64, b as u64, 0, 0]);
                    vec![msd_attack(model, &x, &y, msd.as_ref().unwrap(), seed)?.x_adv]
                }
                _ => {
                    let mut all = Vec::with_capacity(specs.len());
                    for (m, spec) in specs.iter().enumerate() {
                        let seed = fold_key(
                            cfg.seed,
                            Stream::Attack,
                            &[epoch as u64, b as u64, 0, m as u64 + 1],
                        );
                        all.push(pgd_attack(model, &x, &y, spec, seed)?.x_adv);
                    }
                    all
                }
            };
            let traces: Vec<ForwardTrace> =
                adv.iter().map(|a| model.forward_trace(a)).collect::<Result<_>>()?;
            let probs: Vec<ProbBatch> = traces.iter().map(ForwardTrace::probs).collect();

            // Zero-weight distillation terms reduce these to the pure
            // adversarial-training objectives.
            let (loss, pass_grads) = match strategy {
                MpStrategy::Avg | MpStrategy::None => {
                    let (loss, d_adv, _) = generalist_avg_with_grads(&probs, &probs, &y, &zero_kd)?;
                    (loss, d_adv.into_iter().enumerate().collect::<Vec<_>>())
                }
                MpStrategy::Max => {
                    let (loss, k, d_adv, _) = generalist_max_with_grads(&probs, &probs, &y, &zero_kd)?;
                    (loss, vec![(k, d_adv)])
                }
                MpStrategy::Msd => {
                    let dummy = vec![probs[0].clone()];
                    let (loss, d_adv, _) = generalist_msd_with_grads(&probs[0], &dummy, &y, &zero_kd)?;
                    (loss, vec![(0usize, d_adv)])
                }
            };
            if !loss.is_finite() {
                return Err(MatError::Numeric(format!(
                    "non-finite baseline loss at epoch {epoch}"
                )));
            }
            let mut grads: Vec<ArrayD<f64>> = Vec::new();
            for (pass, d_adv) in pass_grads {
                let (pg, _) = model.backward(&traces[pass], &d_adv)?;
                accumulate_grads(&mut grads, pg);
            }
            sgd_step(model, optim, &grads, epoch)?;
            manifest.step_losses[0].push(loss);
            manifest.step_totals.push(loss);
            epoch_total += loss / batch_count as f64;
        }
        manifest.curves.push(super::EpochStats {
            epoch,
            total_loss: epoch_total,
            member_at: vec![epoch_total],
            member_kd: vec![0.0],
            clean_accuracy: vec![model.accuracy(&data.inputs, &data.labels)?],
        });
    }
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(manifest)
}

/// Natural training twin: the same harness and objective with no attack.
pub fn train_natural(
    model: &mut Classifier,
    optim: &mut OptimState,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunManifest> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MatError::Config("training dataset is empty".into()));
    }
    let start = Instant::now();
    let mut manifest = RunManifest::new(cfg, vec!["natural".to_string()])?;
    manifest.step_losses = vec![Vec::new()];

    for epoch in 1..=cfg.epochs {
        let mut epoch_total = 0.0;
        let batches = epoch_batches(data, cfg, epoch)?;
        let batch_count = batches.len();
        for (x, y) in batches {
            let trace = model.forward_trace(&x)?;
            let probs = trace.probs();
            let per_example = InnerLoss::BoostedCe.per_example(&probs, &y)?;
            let loss = per_example.iter().sum::<f64>() / y.len() as f64;
            if !loss.is_finite() {
                return Err(MatError::Numeric(format!("non-finite natural loss at epoch {epoch}")));
            }
            let mut dprobs = InnerLoss::BoostedCe.grad_probs_per_example(&probs, &y)?;
            dprobs /= y.len() as f64;
            let (grads, _) = model.backward(&trace, &dprobs)?;
            sgd_step(model, optim, &grads, epoch)?;
            manifest.step_losses[0].push(loss);
            manifest.step_totals.push(loss);
            epoch_total += loss / batch_count as f64;
        }
        manifest.curves.push(super::EpochStats {
            epoch,
            total_loss: epoch_total,
            member_at: vec![epoch_total],
            member_kd: vec![0.0],
            clean_accuracy: vec![model.accuracy(&data.inputs, &data.labels)?],
        });
    }
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(manifest)
}
