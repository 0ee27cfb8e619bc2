//! Robustness measurement: attack suites, per-type and worst-case accuracy,
//! black-box transfer matrices, and gradient-obfuscation checks.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    fgsm, mim_attack, msd_attack, noise_attack, pgd_attack, AdversarialBatch, MsdBudgets,
    NoiseKind, NormKind, PerturbationSpec,
};
use crate::data::Dataset;
use crate::error::{MatError, Result};
use crate::losses::InnerLoss;
use crate::model::Classifier;
use crate::rng;

/// One attack algorithm with its parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm { eps: f64, inner_loss: InnerLoss },
    Pgd(PerturbationSpec),
    Mim { spec: PerturbationSpec, decay: f64 },
    Msd(MsdBudgets),
    GaussianNoise { eps: f64, trials: usize },
    SaltPepper { eps: f64, trials: usize },
}

impl AttackKind {
    pub fn run(
        &self,
        model: &Classifier,
        x: &Array2<f64>,
        y: &[usize],
        seed: u64,
    ) -> Result<AdversarialBatch> {
        match self {
            AttackKind::Fgsm { eps, inner_loss } => fgsm(model, x, y, *eps, *inner_loss),
            AttackKind::Pgd(spec) => pgd_attack(model, x, y, spec, seed),
            AttackKind::Mim { spec, decay } => mim_attack(model, x, y, spec, *decay, seed),
            AttackKind::Msd(budgets) => msd_attack(model, x, y, budgets, seed),
            AttackKind::GaussianNoise { eps, trials } => noise_attack(
                model,
                x,
                y,
                NoiseKind::GaussianL2,
                *eps,
                *trials,
                InnerLoss::BoostedCe,
                seed,
            ),
            AttackKind::SaltPepper { eps, trials } => noise_attack(
                model,
                x,
                y,
                NoiseKind::SaltPepperL1,
                *eps,
                *trials,
                InnerLoss::BoostedCe,
                seed,
            ),
        }
    }

    /// Stable identifier for the attack's random stream: equal parameters
    /// give equal streams, so duplicated suite entries produce identical
    /// masks.
    fn stream_key(&self) -> u64 {
        let encoded = serde_json::to_vec(self).expect("attack kinds serialize");
        let digest = Sha256::digest(&encoded);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// A named attack grouped under a perturbation type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackEntry {
    pub id: String,
    pub ptype: NormKind,
    pub kind: AttackKind,
}

/// An ordered list of attacks with unique ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSuite {
    pub entries: Vec<AttackEntry>,
}

impl AttackSuite {
    pub fn new(entries: Vec<AttackEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(MatError::Config("attack suite is empty".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|other| other.id == e.id) {
                return Err(MatError::Config(format!("duplicate attack id '{}'", e.id)));
            }
        }
        Ok(AttackSuite { entries })
    }

    /// Quick l-inf suite: FGSM plus PGD with the given step count.
    pub fn desk_linf(eps: f64, steps: usize) -> Self {
        AttackSuite {
            entries: vec![
                AttackEntry {
                    id: "fgsm".into(),
                    ptype: NormKind::Linf,
                    kind: AttackKind::Fgsm { eps, inner_loss: InnerLoss::BoostedCe },
                },
                AttackEntry {
                    id: format!("pgd-{steps}"),
                    ptype: NormKind::Linf,
                    kind: AttackKind::Pgd(PerturbationSpec::pgd_linf(eps, steps)),
                },
            ],
        }
    }

    /// Multi-perturbation suite: gradient and gradient-free attacks per norm.
    pub fn multi_perturbation(linf: PerturbationSpec, l2: PerturbationSpec, l1: PerturbationSpec) -> Self {
        AttackSuite {
            entries: vec![
                AttackEntry {
                    id: "fgsm".into(),
                    ptype: NormKind::Linf,
                    kind: AttackKind::Fgsm { eps: linf.eps, inner_loss: linf.inner_loss },
                },
                AttackEntry {
                    id: "pgd-linf".into(),
                    ptype: NormKind::Linf,
                    kind: AttackKind::Pgd(linf),
                },
                AttackEntry {
                    id: "mim".into(),
                    ptype: NormKind::Linf,
                    kind: AttackKind::Mim { spec: linf, decay: 1.0 },
                },
                AttackEntry {
                    id: "pgd-l2".into(),
                    ptype: NormKind::L2,
                    kind: AttackKind::Pgd(l2),
                },
                AttackEntry {
                    id: "gaussian".into(),
                    ptype: NormKind::L2,
                    kind: AttackKind::GaussianNoise { eps: l2.eps, trials: 10 },
                },
                AttackEntry {
                    id: "pgd-l1".into(),
                    ptype: NormKind::L1,
                    kind: AttackKind::Pgd(l1),
                },
                AttackEntry {
                    id: "salt-pepper".into(),
                    ptype: NormKind::L1,
                    kind: AttackKind::SaltPepper { eps: l1.eps, trials: 10 },
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackAccuracy {
    pub id: String,
    pub ptype: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub ptype: String,
    pub accuracy: f64,
}

/// Evaluation results for one model under one suite.
///
/// Per-type accuracy is the per-example AND across the type's attacks (the
/// strongest attack per example within the type); the worst-case accuracy
/// takes the AND across every attack in the suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub classes: usize,
    pub examples: usize,
    pub clean_accuracy: f64,
    pub per_attack: Vec<AttackAccuracy>,
    pub per_type: Vec<TypeAccuracy>,
    pub r_avg: f64,
    pub r_worst: f64,
    /// Per-example correctness masks keyed by attack id.
    pub masks: BTreeMap<String, Vec<bool>>,
}

pub(crate) struct MaskAggregate {
    pub per_attack: Vec<f64>,
    pub per_type: Vec<(NormKind, f64)>,
    pub r_avg: f64,
    pub r_worst: f64,
}

fn mask_mean(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&b| b).count() as f64 / mask.len().max(1) as f64
}

/// Aggregate per-attack masks into per-attack, per-type, average, and
/// worst-case accuracies. Types appear in first-seen order.
pub(crate) fn aggregate_masks(types: &[NormKind], masks: &[Vec<bool>]) -> MaskAggregate {
    let n = masks.first().map_or(0, Vec::len);
    let per_attack = masks.iter().map(|m| mask_mean(m)).collect();

    let mut type_order: Vec<NormKind> = Vec::new();
    for t in types {
        if !type_order.contains(t) {
            type_order.push(*t);
        }
    }
    let mut per_type = Vec::with_capacity(type_order.len());
    for t in &type_order {
        let mut joint = vec![true; n];
        for (mask, mt) in masks.iter().zip(types) {
            if mt == t {
                for (j, &b) in joint.iter_mut().zip(mask) {
                    *j &= b;
                }
            }
        }
        per_type.push((*t, mask_mean(&joint)));
    }

    let mut worst = vec![true; n];
    for mask in masks {
        for (j, &b) in worst.iter_mut().zip(mask) {
            *j &= b;
        }
    }
    let r_avg = per_type.iter().map(|(_, a)| a).sum::<f64>() / per_type.len().max(1) as f64;
    MaskAggregate {
        per_attack,
        per_type,
        r_avg,
        r_worst: mask_mean(&worst),
    }
}

fn correctness_mask(model: &Classifier, x: &Array2<f64>, y: &[usize]) -> Result<Vec<bool>> {
    let preds = model.predict(x)?;
    Ok(preds.iter().zip(y).map(|(p, t)| p == t).collect())
}

/// Run every attack in the suite against `model` on `data` and aggregate the
/// per-example correctness masks.
pub fn evaluate_suite(
    model: &Classifier,
    suite: &AttackSuite,
    data: &Dataset,
    eval_seed: u64,
    model_name: &str,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(MatError::Config("evaluation dataset is empty".into()));
    }
    if suite.entries.is_empty() {
        return Err(MatError::Config("attack suite is empty".into()));
    }
    let x = &data.inputs;
    let y = &data.labels;
    let clean_mask = correctness_mask(model, x, y)?;

    let mut masks = Vec::with_capacity(suite.entries.len());
    for entry in &suite.entries {
        let seed = rng::fold_key(eval_seed, crate::rng::Stream::Eval, &[entry.kind.stream_key()]);
        let adv = entry.kind.run(model, x, y, seed)?;
        masks.push(correctness_mask(model, &adv.x_adv, y)?);
    }

    let types: Vec<NormKind> = suite.entries.iter().map(|e| e.ptype).collect();
    let agg = aggregate_masks(&types, &masks);

    let per_attack = suite
        .entries
        .iter()
        .zip(&agg.per_attack)
        .map(|(e, &accuracy)| AttackAccuracy {
            id: e.id.clone(),
            ptype: e.ptype.label().to_string(),
            accuracy,
        })
        .collect();
    let per_type = agg
        .per_type
        .iter()
        .map(|(t, accuracy)| TypeAccuracy { ptype: t.label().to_string(), accuracy: *accuracy })
        .collect();
    let mut mask_map = BTreeMap::new();
    for (entry, mask) in suite.entries.iter().zip(&masks) {
        mask_map.insert(entry.id.clone(), mask.clone());
    }

    Ok(EvalReport {
        model: model_name.to_string(),
        classes: model.num_classes(),
        examples: data.len(),
        clean_accuracy: mask_mean(&clean_mask),
        per_attack,
        per_type,
        r_avg: agg.r_avg,
        r_worst: agg.r_worst,
        masks: mask_map,
    })
}

/// Mean over examples of the AND across all attack masks.
pub fn worst_case_accuracy(masks: &[Vec<bool>]) -> Result<f64> {
    let n = masks
        .first()
        .ok_or_else(|| MatError::Config("worst-case accuracy needs at least one mask".into()))?
        .len();
    if masks.iter().any(|m| m.len() != n) {
        return Err(MatError::shape(
            "worst-case accuracy",
            format!("{n} examples per mask"),
            "ragged masks".to_string(),
        ));
    }
    let mut joint = vec![true; n];
    for mask in masks {
        for (j, &b) in joint.iter_mut().zip(mask) {
            *j &= b;
        }
    }
    Ok(mask_mean(&joint))
}

/// Black-box transfer matrix: entry `(target, source)` is the target model's
/// accuracy on adversarial examples generated against the source model; the
/// diagonal is white-box accuracy.
pub fn transfer_matrix(
    models: &[&Classifier],
    names: &[String],
    spec: &PerturbationSpec,
    data: &Dataset,
    eval_seed: u64,
) -> Result<TransferMatrix> {
    if models.len() < 2 {
        return Err(MatError::Config("transfer matrix needs at least two models".into()));
    }
    if names.len() != models.len() {
        return Err(MatError::Config("one name per model required".into()));
    }
    if data.is_empty() {
        return Err(MatError::Config("evaluation dataset is empty".into()));
    }
    let mut adv_per_source = Vec::with_capacity(models.len());
    for (s, source) in models.iter().enumerate() {
        let seed = rng::fold_key(eval_seed, crate::rng::Stream::Eval, &[s as u64]);
        adv_per_source.push(pgd_attack(source, &data.inputs, &data.labels, spec, seed)?.x_adv);
    }
    let mut accuracies = Vec::with_capacity(models.len());
    for target in models {
        let mut row = Vec::with_capacity(models.len());
        for adv in &adv_per_source {
            row.push(target.accuracy(adv, &data.labels)?);
        }
        accuracies.push(row);
    }
    Ok(TransferMatrix { names: names.to_vec(), accuracies })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub names: Vec<String>,
    /// `accuracies[target][source]`.
    pub accuracies: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Gradient-obfuscation sanity report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObfuscationReport {
    pub fgsm_accuracy: f64,
    pub pgd_accuracy: f64,
    pub whitebox_accuracy: f64,
    /// Accuracy under the strongest transfer source (lowest accuracy).
    pub transfer_accuracy: f64,
    pub verdict: Verdict,
    pub violations: Vec<String>,
}

/// Pure verdict rule: iterative attacks must not be weaker than one-step
/// attacks, and white-box attacks must not be weaker than black-box transfer.
pub(crate) fn obfuscation_verdict(
    fgsm_acc: f64,
    pgd_acc: f64,
    whitebox_acc: f64,
    transfer_acc: f64,
    tol: f64,
) -> (Verdict, Vec<String>) {
    let mut violations = Vec::new();
    if pgd_acc > fgsm_acc + tol {
        violations.push(format!(
            "one-step beats iterative: pgd accuracy {pgd_acc:.4} > fgsm accuracy {fgsm_acc:.4} + {tol}"
        ));
    }
    if whitebox_acc > transfer_acc + tol {
        violations.push(format!(
            "whitebox > blackbox: whitebox accuracy {whitebox_acc:.4} > transfer accuracy {transfer_acc:.4} + {tol}"
        ));
    }
    if violations.is_empty() {
        (Verdict::Pass, violations)
    } else {
        (Verdict::Fail, violations)
    }
}

/// Check a model for gradient-obfuscation signatures at budget `eps`:
/// FGSM vs PGD-20, and white-box PGD vs transfer from `sources`.
pub fn obfuscation_check(
    model: &Classifier,
    sources: &[&Classifier],
    data: &Dataset,
    eps: f64,
    tol: f64,
    eval_seed: u64,
) -> Result<ObfuscationReport> {
    if sources.is_empty() {
        return Err(MatError::Config(
            "obfuscation check needs at least one transfer source".into(),
        ));
    }
    if data.is_empty() {
        return Err(MatError::Config("evaluation dataset is empty".into()));
    }
    let x = &data.inputs;
    let y = &data.labels;
    let fgsm_adv = fgsm(model, x, y, eps, InnerLoss::BoostedCe)?;
    let fgsm_acc = model.accuracy(&fgsm_adv.x_adv, y)?;
    let spec = PerturbationSpec::pgd_linf(eps, 20);
    let pgd_adv = pgd_attack(model, x, y, &spec, rng::fold_key(eval_seed, crate::rng::Stream::Eval, &[0]))?;
    let pgd_acc = model.accuracy(&pgd_adv.x_adv, y)?;

    let mut transfer_acc = f64::INFINITY;
    for (s, source) in sources.iter().enumerate() {
        let seed = rng::fold_key(eval_seed, crate::rng::Stream::Eval, &[1 + s as u64]);
        let adv = pgd_attack(source, x, y, &spec, seed)?;
        transfer_acc = transfer_acc.min(model.accuracy(&adv.x_adv, y)?);
    }

    let (verdict, violations) = obfuscation_verdict(fgsm_acc, pgd_acc, pgd_acc, transfer_acc, tol);
    Ok(ObfuscationReport {
        fgsm_accuracy: fgsm_acc,
        pgd_accuracy: pgd_acc,
        whitebox_accuracy: pgd_acc,
        transfer_accuracy: transfer_acc,
        verdict,
        violations,
    })
}

#[cfg(test)]
mod tests;
