//! Training objectives: boosted cross-entropy, KL distillation, the mutual
//! adversarial-training pair/cohort losses, and the specialist/generalist
//! losses for multi-perturbation defense.
//!
//! All batch losses are means over the batch. The `*_with_grads` variants
//! return gradients of the (weighted) total with respect to each probability
//! batch they consume; those gradients already include the `1/batch` factor
//! and are ready to feed into [`Classifier::backward`].
//!
//! [`Classifier::backward`]: crate::model::Classifier::backward

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{MatError, Result};
use crate::model::{ProbBatch, ProbVector, PROB_FLOOR};

/// Convention for the divisor on the cohort KD sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortDivisor {
    /// Divide the KD double sum by `N - 1` (number of networks minus one), so
    /// the two-network cohort reduces exactly to the pair loss.
    NMinus1,
    /// Escape hatch: an explicit divisor value.
    AsWritten { divisor: f64 },
}

impl Default for CohortDivisor {
    fn default() -> Self {
        CohortDivisor::NMinus1
    }
}

/// Trade-off weights for mixing adversarial-training and distillation terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the distillation terms, in `[0, 1]`.
    pub alpha: f64,
    /// When true, teacher-side gradients of every KD term are zeroed: soft
    /// labels act as constants.
    pub detach_teacher: bool,
    #[serde(default)]
    pub cohort_divisor: CohortDivisor,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        let w = LossWeights {
            alpha,
            detach_teacher: false,
            cohort_divisor: CohortDivisor::NMinus1,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(MatError::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if let CohortDivisor::AsWritten { divisor } = self.cohort_divisor {
            if !(divisor > 0.0) {
                return Err(MatError::Config(format!(
                    "cohort divisor must be positive, got {divisor}"
                )));
            }
        }
        Ok(())
    }

    fn divisor_for(&self, networks: usize) -> f64 {
        match self.cohort_divisor {
            CohortDivisor::NMinus1 => (networks - 1) as f64,
            CohortDivisor::AsWritten { divisor } => divisor,
        }
    }
}

/// Itemized cohort loss: the weighted total plus the raw (unweighted,
/// undivided) per-network adversarial and distillation terms.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    /// Per-network classification loss on that network's adversarial inputs.
    pub at_terms: Vec<f64>,
    /// Per-network sum of KD terms in which the network is the student.
    pub kd_terms: Vec<f64>,
    pub alpha: f64,
    pub kd_divisor: f64,
}

impl LossBreakdown {
    /// Recombine the parts; equals `total` within 1e-8 by construction.
    pub fn recombine(&self) -> f64 {
        let at: f64 = self.at_terms.iter().sum();
        let kd: f64 = self.kd_terms.iter().sum();
        (1.0 - self.alpha) * at + self.alpha / self.kd_divisor * kd
    }
}

/// A registered scalar classification loss usable inside attacks and
/// input-gradient computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerLoss {
    /// Boosted cross-entropy: `-log p_y - log(1 - max_{k != y} p_k)`.
    BoostedCe,
    /// Plain cross-entropy: `-log p_y`.
    Ce,
}

impl InnerLoss {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "boosted_ce" => Ok(InnerLoss::BoostedCe),
            "ce" => Ok(InnerLoss::Ce),
            other => Err(MatError::Config(format!(
                "unknown loss '{other}' (registered: boosted_ce, ce)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InnerLoss::BoostedCe => "boosted_ce",
            InnerLoss::Ce => "ce",
        }
    }

    /// Per-example loss values (no batch averaging).
    pub fn per_example(&self, probs: &ProbBatch, y: &[usize]) -> Result<Vec<f64>> {
        check_labels(probs, y)?;
        let p = probs.values();
        Ok(y.iter()
            .zip(p.rows())
            .map(|(&yi, row)| match self {
                InnerLoss::BoostedCe => bce_row(row, yi),
                InnerLoss::Ce => -ln_floored(row[yi]),
            })
            .collect())
    }

    /// Gradient of the per-example loss with respect to the probabilities.
    pub fn grad_probs_per_example(&self, probs: &ProbBatch, y: &[usize]) -> Result<Array2<f64>> {
        check_labels(probs, y)?;
        let p = probs.values();
        let mut grad = Array2::<f64>::zeros(p.raw_dim());
        for ((mut grow, row), &yi) in grad.rows_mut().into_iter().zip(p.rows()).zip(y.iter()) {
            match self {
                InnerLoss::BoostedCe => bce_row_grad(row, yi, &mut grow),
                InnerLoss::Ce => grow[yi] = -inv_above_floor(row[yi]),
            }
        }
        Ok(grad)
    }
}

fn ln_floored(v: f64) -> f64 {
    v.max(PROB_FLOOR).ln()
}

/// Derivative of `ln(max(v, floor))`: zero below the floor.
fn inv_above_floor(v: f64) -> f64 {
    if v > PROB_FLOOR {
        1.0 / v
    } else {
        0.0
    }
}

fn check_labels(probs: &ProbBatch, y: &[usize]) -> Result<()> {
    if probs.len() != y.len() {
        return Err(MatError::shape(
            "loss labels",
            format!("{} labels", probs.len()),
            format!("{}", y.len()),
        ));
    }
    let classes = probs.classes();
    for &yi in y {
        if yi >= classes {
            return Err(MatError::LabelOutOfRange { label: yi, classes });
        }
    }
    Ok(())
}

/// Index of the largest entry excluding `y`, lowest index on ties.
fn max_other_index(row: ArrayView1<'_, f64>, y: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (k, &v) in row.iter().enumerate() {
        if k != y && v > best_v {
            best_v = v;
            best = k;
        }
    }
    best
}

fn bce_row(row: ArrayView1<'_, f64>, y: usize) -> f64 {
    let m = max_other_index(row, y);
    -ln_floored(row[y]) - ln_floored(1.0 - row[m])
}

fn bce_row_grad(row: ArrayView1<'_, f64>, y: usize, grad: &mut ndarray::ArrayViewMut1<'_, f64>) {
    let m = max_other_index(row, y);
    grad[y] += -inv_above_floor(row[y]);
    let margin = 1.0 - row[m];
    if margin > PROB_FLOOR {
        grad[m] += 1.0 / margin;
    }
}

fn kl_row(t: ArrayView1<'_, f64>, p: ArrayView1<'_, f64>) -> f64 {
    t.iter()
        .zip(p.iter())
        .map(|(&tk, &pk)| tk * (ln_floored(tk) - ln_floored(pk)))
        .sum()
}

/// Boosted cross-entropy on a single probability vector:
/// `-log p_y - log(1 - max_{k != y} p_k)`, kept finite by the probability
/// floor.
pub fn boosted_ce(p: &ProbVector, y: usize) -> Result<f64> {
    if y >= p.len() {
        return Err(MatError::LabelOutOfRange { label: y, classes: p.len() });
    }
    if p.len() < 2 {
        return Err(MatError::Config("boosted cross-entropy needs K >= 2".into()));
    }
    Ok(bce_row(p.values().view(), y))
}

/// Kullback-Leibler divergence `KL(teacher || target)`, non-negative, zero
/// iff the inputs agree within the probability floor.
pub fn kl_div(teacher: &ProbVector, target: &ProbVector) -> Result<f64> {
    if teacher.len() != target.len() {
        return Err(MatError::shape(
            "kl divergence",
            format!("{} classes", teacher.len()),
            format!("{}", target.len()),
        ));
    }
    Ok(kl_row(teacher.values().view(), target.values().view()).max(0.0))
}

fn batch_mean_bce(probs: &ProbBatch, y: &[usize]) -> Result<f64> {
    let values = InnerLoss::BoostedCe.per_example(probs, y)?;
    Ok(values.iter().sum::<f64>() / values.len().max(1) as f64)
}

fn batch_mean_kl(teacher: &ProbBatch, target: &ProbBatch) -> Result<f64> {
    if teacher.len() != target.len() || teacher.classes() != target.classes() {
        return Err(MatError::shape(
            "kl batch",
            format!("{}x{}", teacher.len(), teacher.classes()),
            format!("{}x{}", target.len(), target.classes()),
        ));
    }
    let n = teacher.len().max(1) as f64;
    let sum: f64 = teacher
        .values()
        .rows()
        .into_iter()
        .zip(target.values().rows())
        .map(|(t, p)| kl_row(t, p))
        .sum();
    Ok(sum / n)
}

/// Accumulate `scale * d(mean bce)/d(probs)` into `acc`.
fn add_bce_grad(acc: &mut Array2<f64>, probs: &ProbBatch, y: &[usize], scale: f64) {
    let n = probs.len() as f64;
    for ((mut grow, row), &yi) in acc
        .rows_mut()
        .into_iter()
        .zip(probs.values().rows())
        .zip(y.iter())
    {
        let m = max_other_index(row, yi);
        grow[yi] += scale / n * (-inv_above_floor(row[yi]));
        let margin = 1.0 - row[m];
        if margin > PROB_FLOOR {
            grow[m] += scale / n / margin;
        }
    }
}

/// Accumulate `scale * d(mean KL(t||p))` into the student (`d_target`) and,
/// unless detached, the teacher (`d_teacher`) gradients.
fn add_kl_grads(
    d_teacher: Option<&mut Array2<f64>>,
    d_target: &mut Array2<f64>,
    teacher: &ProbBatch,
    target: &ProbBatch,
    scale: f64,
) {
    let n = teacher.len() as f64;
    let t = teacher.values();
    let p = target.values();
    for ((mut gp, trow), prow) in d_target.rows_mut().into_iter().zip(t.rows()).zip(p.rows()) {
        for k in 0..trow.len() {
            gp[k] += scale / n * (-trow[k] * inv_above_floor(prow[k]));
        }
    }
    if let Some(d_teacher) = d_teacher {
        for ((mut gt, trow), prow) in d_teacher.rows_mut().into_iter().zip(t.rows()).zip(p.rows()) {
            for k in 0..trow.len() {
                let above = if trow[k] > PROB_FLOOR { 1.0 } else { 0.0 };
                gt[k] += scale / n * (ln_floored(trow[k]) - ln_floored(prow[k]) + above);
            }
        }
    }
}

/// Gradients of a cohort loss with respect to each consumed probability batch.
pub struct CohortGrads {
    /// Gradient with respect to each network's adversarial-input probabilities.
    pub d_adv: Vec<Array2<f64>>,
    /// Gradient with respect to each network's clean-input probabilities
    /// (teacher side; all zeros under `detach_teacher`).
    pub d_clean: Vec<Array2<f64>>,
}

fn check_cohort_batches<'a>(
    batches: impl IntoIterator<Item = &'a ProbBatch>,
    y: &[usize],
) -> Result<()> {
    let mut classes = None;
    for batch in batches {
        if batch.len() != y.len() {
            return Err(MatError::shape(
                "cohort loss",
                format!("{} examples", y.len()),
                format!("{}", batch.len()),
            ));
        }
        let expected = *classes.get_or_insert(batch.classes());
        if batch.classes() != expected {
            return Err(MatError::shape(
                "cohort loss",
                format!("{expected} classes"),
                format!("{}", batch.classes()),
            ));
        }
    }
    Ok(())
}

/// Two-network mutual loss:
/// `(1 - alpha) (AT_1 + AT_2) + alpha (KD_1 + KD_2)` with
/// `AT_n` the boosted cross-entropy on network `n`'s adversarial inputs and
/// `KD_n = KL(p_peer(x) || p_n(x_adv_n))` distilling the peer's clean-input
/// prediction onto the adversarial output.
pub fn mat_pair_loss(
    p1_adv: &ProbBatch,
    p1_clean: &ProbBatch,
    p2_adv: &ProbBatch,
    p2_clean: &ProbBatch,
    y: &[usize],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    check_cohort_batches([p1_adv, p2_adv, p1_clean, p2_clean], y)?;
    let at1 = batch_mean_bce(p1_adv, y)?;
    let at2 = batch_mean_bce(p2_adv, y)?;
    let kd1 = batch_mean_kl(p2_clean, p1_adv)?;
    let kd2 = batch_mean_kl(p1_clean, p2_adv)?;
    let total = (1.0 - w.alpha) * (at1 + at2) + w.alpha * (kd1 + kd2);
    Ok(LossBreakdown {
        total,
        at_terms: vec![at1, at2],
        kd_terms: vec![kd1, kd2],
        alpha: w.alpha,
        kd_divisor: 1.0,
    })
}

/// Cohort generalization to `N >= 2` networks:
/// `(1 - alpha) sum_n AT_n + (alpha / divisor) sum_n sum_{m != n}
/// KL(p_m(x) || p_n(x_adv_n))`.
pub fn mat_cohort_loss(
    adv: &[ProbBatch],
    clean: &[ProbBatch],
    y: &[usize],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(mat_cohort_loss_with_grads(adv, clean, y, w)?.0)
}

/// Cohort loss plus gradients with respect to every probability batch.
pub fn mat_cohort_loss_with_grads(
    adv: &[ProbBatch],
    clean: &[ProbBatch],
    y: &[usize],
    w: &LossWeights,
) -> Result<(LossBreakdown, CohortGrads)> {
    w.validate()?;
    let n = adv.len();
    if n < 2 || clean.len() != n {
        return Err(MatError::Config(format!(
            "cohort loss needs N >= 2 networks with clean and adversarial outputs, got {} adv / {} clean",
            n,
            clean.len()
        )));
    }
    check_cohort_batches(adv.iter().chain(clean.iter()), y)?;
    let divisor = w.divisor_for(n);
    if !(divisor > 0.0) {
        return Err(MatError::Config(format!("KD divisor must be positive, got {divisor}")));
    }

    let mut at_terms = Vec::with_capacity(n);
    let mut kd_terms = vec![0.0; n];
    let mut d_adv: Vec<Array2<f64>> = adv
        .iter()
        .map(|b| Array2::zeros(b.values().raw_dim()))
        .collect();
    let mut d_clean: Vec<Array2<f64>> = clean
        .iter()
        .map(|b| Array2::zeros(b.values().raw_dim()))
        .collect();

    for (i, adv_i) in adv.iter().enumerate() {
        at_terms.push(batch_mean_bce(adv_i, y)?);
        add_bce_grad(&mut d_adv[i], adv_i, y, 1.0 - w.alpha);
        for (m, clean_m) in clean.iter().enumerate() {
            if m == i {
                continue;
            }
            kd_terms[i] += batch_mean_kl(clean_m, adv_i)?;
            let teacher_grad = if w.detach_teacher {
                None
            } else {
                Some(&mut d_clean[m])
            };
            add_kl_grads(teacher_grad, &mut d_adv[i], clean_m, adv_i, w.alpha / divisor);
        }
    }

    let total = (1.0 - w.alpha) * at_terms.iter().sum::<f64>()
        + w.alpha / divisor * kd_terms.iter().sum::<f64>();
    Ok((
        LossBreakdown {
            total,
            at_terms,
            kd_terms,
            alpha: w.alpha,
            kd_divisor: divisor,
        },
        CohortGrads { d_adv, d_clean },
    ))
}

/// Specialist objective for one perturbation type:
/// `(1 - alpha) L_C(p_m(x_adv^m), y) + (alpha / M) sum_peers
/// KL(p_peer(x) || p_m(x_adv^m))`, where `M` is the specialist count.
pub fn specialist_loss(
    adv_m: &ProbBatch,
    peer_clean: &[ProbBatch],
    y: &[usize],
    w: &LossWeights,
    num_specialists: usize,
) -> Result<f64> {
    Ok(specialist_loss_with_grads(adv_m, peer_clean, y, w, num_specialists)?.0)
}

pub fn specialist_loss_with_grads(
    adv_m: &ProbBatch,
    peer_clean: &[ProbBatch],
    y: &[usize],
    w: &LossWeights,
    num_specialists: usize,
) -> Result<(f64, Array2<f64>, Vec<Array2<f64>>)> {
    w.validate()?;
    if peer_clean.is_empty() {
        return Err(MatError::Config("specialist loss needs a non-empty peer set".into()));
    }
    if num_specialists == 0 {
        return Err(MatError::Config("specialist count must be positive".into()));
    }
    let scale = w.alpha / num_specialists as f64;
    let at = batch_mean_bce(adv_m, y)?;
    let mut d_adv = Array2::zeros(adv_m.values().raw_dim());
    add_bce_grad(&mut d_adv, adv_m, y, 1.0 - w.alpha);
    let mut loss = (1.0 - w.alpha) * at;
    let mut d_peers = Vec::with_capacity(peer_clean.len());
    for peer in peer_clean {
        loss += scale * batch_mean_kl(peer, adv_m)?;
        let mut d_peer = Array2::zeros(peer.values().raw_dim());
        let teacher_grad = if w.detach_teacher { None } else { Some(&mut d_peer) };
        add_kl_grads(teacher_grad, &mut d_adv, peer, adv_m, scale);
        d_peers.push(d_peer);
    }
    Ok((loss, d_adv, d_peers))
}

/// Generalist trained on the average loss over all perturbation types.
pub fn generalist_loss_avg(
    adv_per_type: &[ProbBatch],
    specialist_clean: &[ProbBatch],
    y: &[usize],
    w: &LossWeights,
) -> Result<f64> {
    Ok(generalist_avg_with_grads(adv_per_type, specialist_clean, y, w)?.0)
}

pub fn generalist_avg_with_grads(
    adv_per_type: &[ProbBatch],
    specialist_clean: &[ProbBatch],
    y: &[usize],
    w: &LossWeights,
) -> Result<(f64, Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    w.validate()?;
    let m = adv_per_type.len();
    if m == 0 || specialist_clean.len() != m {
        return Err(MatError::Config(format!(
            "generalist average loss needs matching per-type outputs, got {} adv / {} teachers",
            m,
            specialist_clean.len()
        )));
    }
    let inv_m = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut d_adv = Vec::with_capacity(m);
    let mut d_clean = Vec::with_capacity(m);
    for (adv, teacher) in adv_per_type.iter().zip(specialist_clean) {
        loss += inv_m * (1.0 - w.alpha) * batch_mean_bce(adv, y)?;
        loss += inv_m * w.alpha * batch_mean_kl(teacher, adv)?;
        let mut da = Array2::zeros(adv.values().raw_dim());
        add_bce_grad(&mut da, adv, y, inv_m * (1.0 - w.alpha));
        let mut dt = Array2::zeros(teacher.values().raw_dim());
        let teacher_grad = if w.detach_teacher { None } else { Some(&mut dt) };
        add_kl_grads(teacher_grad, &mut da, teacher, adv, inv_m * w.alpha);
        d_adv.push(da);
        d_clean.push(dt);
    }
    Ok((loss, d_adv, d_clean))
}

/// Generalist trained on the worst perturbation type only. Returns the loss
/// and the selected type index (argmax of the batch-mean classification loss,
/// lowest index on ties).
pub fn generalist_loss_max(
    adv_per_type: &[ProbBatch],
    specialist_clean: &[ProbBatch],
    y: &[usize],
    w: &LossWeights,
) -> Result<(f64, usize)> {
    let (loss, k, _, _) = generalist_max_with_grads(adv_per_type, specialist_clean, y, w)?;
    Ok((loss, k))
}

pub fn generalist_max_with_grads(
    adv_per_type: &[ProbBatch],
    specialist_clean: &[ProbBatch],
    y: &[usize],
    w: &LossWeights,
) -> Result<(f64, usize, Array2<f64>, Array2<f64>)> {
    w.validate()?;
    let m = adv_per_type.len();
    if m == 0 || specialist_clean.len() != m {
        return Err(MatError::Config(format!(
            "generalist max loss needs matching per-type outputs, got {} adv / {} teachers",
            m,
            specialist_clean.len()
        )));
    }
    let mut k = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (i, adv) in adv_per_type.iter().enumerate() {
        let at = batch_mean_bce(adv, y)?;
        if at > best {
            best = at;
            k = i;
        }
    }
    let adv = &adv_per_type[k];
    let teacher = &specialist_clean[k];
    let loss = (1.0 - w.alpha) * best + w.alpha * batch_mean_kl(teacher, adv)?;
    let mut d_adv = Array2::zeros(adv.values().raw_dim());
    add_bce_grad(&mut d_adv, adv, y, 1.0 - w.alpha);
    let mut d_clean = Array2::zeros(teacher.values().raw_dim());
    let teacher_grad = if w.detach_teacher { None } else { Some(&mut d_clean) };
    add_kl_grads(teacher_grad, &mut d_adv, teacher, adv, w.alpha);
    Ok((loss, k, d_adv, d_clean))
}

/// Generalist trained on multi-steepest-descent adversarial examples: the
/// classification term is shared across the `M` summands, each contributing
/// its specialist's soft label.
pub fn generalist_loss_msd(
    msd_adv: &ProbBatch,
    specialist_clean: &[ProbBatch],
    y: &[usize],
    w: &LossWeights,
) -> Result<f64> {
    Ok(generalist_msd_with_grads(msd_adv, specialist_clean, y, w)?.0)
}

pub fn generalist_msd_with_grads(
    msd_adv: &ProbBatch,
    specialist_clean: &[ProbBatch],
    y: &[usize],
    w: &LossWeights,
) -> Result<(f64, Array2<f64>, Vec<Array2<f64>>)> {
    w.validate()?;
    let m = specialist_clean.len();
    if m == 0 {
        return Err(MatError::Config("generalist msd loss needs at least one teacher".into()));
    }
    let inv_m = 1.0 / m as f64;
    let at = batch_mean_bce(msd_adv, y)?;
    let mut loss = (1.0 - w.alpha) * at;
    let mut d_adv = Array2::zeros(msd_adv.values().raw_dim());
    add_bce_grad(&mut d_adv, msd_adv, y, 1.0 - w.alpha);
    let mut d_clean = Vec::with_capacity(m);
    for teacher in specialist_clean {
        loss += inv_m * w.alpha * batch_mean_kl(teacher, msd_adv)?;
        let mut dt = Array2::zeros(teacher.values().raw_dim());
        let teacher_grad = if w.detach_teacher { None } else { Some(&mut dt) };
        add_kl_grads(teacher_grad, &mut d_adv, teacher, msd_adv, inv_m * w.alpha);
        d_clean.push(dt);
    }
    Ok((loss, d_adv, d_clean))
}

/// Total multi-perturbation objective: the plain sum of all network losses.
pub fn matmp_total(specialist_losses: &[f64], generalist_loss: f64) -> f64 {
    specialist_losses.iter().sum::<f64>() + generalist_loss
}
