//! Adversarial example generation: FGSM, PGD under l-inf/l2/l1 budgets,
//! momentum iterative attacks, multi-steepest-descent, and gradient-free
//! noise baselines.
//!
//! Attacks are pure functions of `(model, inputs, labels, spec, seed)`;
//! per-restart randomness is derived from the seed by restart index, so
//! enlarging the restart count never changes the earlier restarts.

mod projection;

pub use projection::{project_ball, project_row, NormKind};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MatError, Result};
use crate::losses::InnerLoss;
use crate::model::{input_gradient, Classifier};
use crate::rng;

/// Starting point for iterative attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Start from the clean input.
    Zero,
    /// Start from a random point of the budget ball (per-coordinate uniform,
    /// then projected).
    UniformInBall,
}

/// Full description of one iterative attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub norm: NormKind,
    /// Budget in input-scale units (inputs live in `[0, 1]`).
    pub eps: f64,
    pub step_size: f64,
    pub steps: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_init")]
    pub init: InitMode,
    #[serde(default = "default_inner_loss")]
    pub inner_loss: InnerLoss,
}

fn default_restarts() -> usize {
    1
}

fn default_init() -> InitMode {
    InitMode::UniformInBall
}

fn default_inner_loss() -> InnerLoss {
    InnerLoss::BoostedCe
}

impl PerturbationSpec {
    pub fn new(norm: NormKind, eps: f64, step_size: f64, steps: usize) -> Self {
        PerturbationSpec {
            norm,
            eps,
            step_size,
            steps,
            restarts: 1,
            init: InitMode::UniformInBall,
            inner_loss: InnerLoss::BoostedCe,
        }
    }

    /// An l-inf PGD spec with the common `2.5 * eps / steps` step size.
    pub fn pgd_linf(eps: f64, steps: usize) -> Self {
        PerturbationSpec::new(NormKind::Linf, eps, 2.5 * eps / steps as f64, steps)
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_init(mut self, init: InitMode) -> Self {
        self.init = init;
        self
    }

    pub fn with_inner_loss(mut self, inner_loss: InnerLoss) -> Self {
        self.inner_loss = inner_loss;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(MatError::Config(format!("attack budget must be positive, got {}", self.eps)));
        }
        if !(self.step_size > 0.0) {
            return Err(MatError::Config(format!(
                "attack step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.steps < 1 {
            return Err(MatError::Config("attack needs at least one step".into()));
        }
        if self.restarts < 1 {
            return Err(MatError::Config("attack needs at least one restart".into()));
        }
        Ok(())
    }
}

/// Result of an attack on a batch.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    /// Perturbed inputs, exactly inside `[0, 1]`.
    pub x_adv: Array2<f64>,
    /// `x_adv - x`.
    pub delta: Array2<f64>,
    /// Per example: the restart that produced the kept row. Restarts are
    /// ranked by (misclassification, final inner loss), so a successful
    /// attack is always preferred over a merely high-loss one.
    pub best_restart: Vec<usize>,
    /// Per example: the largest final inner loss seen over all restarts.
    pub max_inner_loss: Vec<f64>,
    /// Per example: the final inner loss of the kept row.
    pub final_loss: Vec<f64>,
}

impl AdversarialBatch {
    /// Budget invariant: per-example norm within `eps + 1e-6` and every entry
    /// of `x_adv` inside `[0, 1]`.
    pub fn check_budget(&self, norm: NormKind, eps: f64) -> Result<()> {
        for row in self.delta.rows() {
            let n = norm.norm_of(row.as_slice().expect("contiguous delta"));
            if n > eps + 1e-6 {
                return Err(MatError::Numeric(format!(
                    "perturbation {} norm {n} exceeds budget {eps}",
                    norm.label()
                )));
            }
        }
        if !self.x_adv.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(MatError::Numeric("adversarial input escapes [0, 1]".into()));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clip01(mut x: Array2<f64>) -> Array2<f64> {
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
    x
}

fn check_inputs(x: &Array2<f64>, y: &[usize]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(MatError::shape(
            "attack inputs",
            format!("{} labels", x.nrows()),
            format!("{}", y.len()),
        ));
    }
    Ok(())
}

/// Per-norm steepest-ascent step from a gradient batch.
///
/// l-inf: `eta * sign(g)`; l2: `eta * g / ||g||_2` per example; l1: a sign
/// step of size `eta` on the top one percent of coordinates by gradient
/// magnitude (at least one), matching the coordinate-sparse geometry of the
/// l1 ball.
fn step_direction(grad: &Array2<f64>, norm: NormKind, eta: f64) -> Array2<f64> {
    let mut step = Array2::<f64>::zeros(grad.raw_dim());
    match norm {
        NormKind::Linf => {
            step.zip_mut_with(grad, |s, &g| *s = eta * sign(g));
        }
        NormKind::L2 => {
            for (mut srow, grow) in step.rows_mut().into_iter().zip(grad.rows()) {
                let n = grow.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    for (s, &g) in srow.iter_mut().zip(grow.iter()) {
                        *s = eta * g / n;
                    }
                }
            }
        }
        NormKind::L1 => {
            let d = grad.ncols();
            let k = (d / 100).max(1);
            for (mut srow, grow) in step.rows_mut().into_iter().zip(grad.rows()) {
                let mut order: Vec<usize> = (0..d).collect();
                order.sort_by(|&a, &b| {
                    grow[b]
                        .abs()
                        .partial_cmp(&grow[a].abs())
                        .expect("finite gradients")
                        .then(a.cmp(&b))
                });
                for &idx in order.iter().take(k) {
                    srow[idx] = eta * sign(grow[idx]);
                }
            }
        }
    }
    step
}

/// Move to `proposal`, then enforce the budget ball around `x` and the
/// `[0, 1]` range (clipping is pointwise shrinking, so it never re-violates
/// the ball).
fn project_and_clip(x: &Array2<f64>, proposal: Array2<f64>, norm: NormKind, eps: f64) -> Array2<f64> {
    let mut delta = proposal - x;
    for row in delta.rows_mut() {
        project_row(row, norm, eps);
    }
    clip01(delta + x)
}

fn random_start(
    x: &Array2<f64>,
    norm: NormKind,
    eps: f64,
    init: InitMode,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    match init {
        InitMode::Zero => x.clone(),
        InitMode::UniformInBall => {
            let delta = Array2::from_shape_simple_fn(x.raw_dim(), || rng.random_range(-eps..eps));
            project_and_clip(x, delta + x, norm, eps)
        }
    }
}

/// Best-of-restarts driver shared by all attacks. `trajectory` maps a
/// restart-local generator to the final perturbed batch; rows are then ranked
/// per example by (misclassified, final inner loss).
fn run_restarts(
    model: &Classifier,
    x: &Array2<f64>,
    y: &[usize],
    inner: &InnerLoss,
    restarts: usize,
    seed: u64,
    mut trajectory: impl FnMut(&mut ChaCha8Rng) -> Result<Array2<f64>>,
) -> Result<AdversarialBatch> {
    const RESTART_TAG: u64 = 101;
    let n = x.nrows();
    let mut best_x = x.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    let mut best_miss = vec![false; n];
    let mut best_restart = vec![0usize; n];
    let mut max_loss = vec![f64::NEG_INFINITY; n];

    for r in 0..restarts {
        let mut rng = rng::derive(seed, RESTART_TAG, &[r as u64]);
        let x_final = trajectory(&mut rng)?;
        let probs = model.forward_probs(&x_final)?;
        let losses = inner.per_example(&probs, y)?;
        let preds = probs.predictions();
        for i in 0..n {
            let miss = preds[i] != y[i];
            max_loss[i] = max_loss[i].max(losses[i]);
            let better = (miss, losses[i]) > (best_miss[i], best_loss[i]);
            if better {
                best_miss[i] = miss;
                best_loss[i] = losses[i];
                best_restart[i] = r;
                best_x.row_mut(i).assign(&x_final.row(i));
            }
        }
    }

    let delta = &best_x - x;
    Ok(AdversarialBatch {
        x_adv: best_x,
        delta,
        best_restart,
        max_inner_loss: max_loss,
        final_loss: best_loss,
    })
}

/// Projected gradient descent on the inner loss: `steps` steepest-ascent
/// iterations, each followed by projection onto the budget ball and a clip to
/// `[0, 1]`, best restart kept per example.
pub fn pgd_attack(
    model: &Classifier,
    x: &Array2<f64>,
    y: &[usize],
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    check_inputs(x, y)?;
    run_restarts(model, x, y, &spec.inner_loss, spec.restarts, seed, |rng| {
        let mut x_cur = random_start(x, spec.norm, spec.eps, spec.init, rng);
        for _ in 0..spec.steps {
            let grad = input_gradient(model, &spec.inner_loss, &x_cur, y)?;
            let step = step_direction(&grad, spec.norm, spec.step_size);
            x_cur = project_and_clip(x, x_cur + step, spec.norm, spec.eps);
        }
        Ok(x_cur)
    })
}

/// Fast gradient sign method: the single-step l-inf attack,
/// `clip(x + eps * sign(grad))`. Definitionally PGD with one step of size
/// `eps` from a zero start.
pub fn fgsm(
    model: &Classifier,
    x: &Array2<f64>,
    y: &[usize],
    eps: f64,
    inner_loss: InnerLoss,
) -> Result<AdversarialBatch> {
    let spec = PerturbationSpec {
        norm: NormKind::Linf,
        eps,
        step_size: eps,
        steps: 1,
        restarts: 1,
        init: InitMode::Zero,
        inner_loss,
    };
    pgd_attack(model, x, y, &spec, 0)
}

/// Momentum iterative method: l-inf sign steps on an accumulator
/// `g <- decay * g + grad / ||grad||_1`. With zero decay this reproduces
/// PGD-l-inf exactly.
pub fn mim_attack(
    model: &Classifier,
    x: &Array2<f64>,
    y: &[usize],
    spec: &PerturbationSpec,
    decay: f64,
    seed: u64,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    check_inputs(x, y)?;
    if spec.norm != NormKind::Linf {
        return Err(MatError::Config(format!(
            "momentum iterative attack requires the linf norm, got {}",
            spec.norm.label()
        )));
    }
    if decay < 0.0 {
        return Err(MatError::Config(format!("momentum decay must be non-negative, got {decay}")));
    }
    run_restarts(model, x, y, &spec.inner_loss, spec.restarts, seed, |rng| {
        let mut x_cur = random_start(x, spec.norm, spec.eps, spec.init, rng);
        let mut acc = Array2::<f64>::zeros(x.raw_dim());
        for _ in 0..spec.steps {
            let grad = input_gradient(model, &spec.inner_loss, &x_cur, y)?;
            for (mut arow, grow) in acc.rows_mut().into_iter().zip(grad.rows()) {
                let l1: f64 = grow.iter().map(|v| v.abs()).sum();
                for (a, &g) in arow.iter_mut().zip(grow.iter()) {
                    let normalized = if l1 > 0.0 { g / l1 } else { 0.0 };
                    *a = decay * *a + normalized;
                }
            }
            let step = step_direction(&acc, NormKind::Linf, spec.step_size);
            x_cur = project_and_clip(x, x_cur + step, spec.norm, spec.eps);
        }
        Ok(x_cur)
    })
}

/// Per-norm budgets for multi-steepest-descent. All three specs must share
/// the step count and inner loss; the init mode and restart count are taken
/// from the l-inf spec.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MsdBudgets {
    pub linf: PerturbationSpec,
    pub l2: PerturbationSpec,
    pub l1: PerturbationSpec,
}

impl MsdBudgets {
    pub fn validate(&self) -> Result<()> {
        for (spec, expected) in [
            (&self.linf, NormKind::Linf),
            (&self.l2, NormKind::L2),
            (&self.l1, NormKind::L1),
        ] {
            spec.validate()?;
            if spec.norm != expected {
                return Err(MatError::Config(format!(
                    "msd budget slot for {} carries norm {}",
                    expected.label(),
                    spec.norm.label()
                )));
            }
        }
        if self.linf.steps != self.l2.steps || self.linf.steps != self.l1.steps {
            return Err(MatError::Config(format!(
                "msd requires a shared step count, got ({}, {}, {})",
                self.linf.steps, self.l2.steps, self.l1.steps
            )));
        }
        if self.linf.inner_loss != self.l2.inner_loss || self.linf.inner_loss != self.l1.inner_loss {
            return Err(MatError::Config("msd requires a shared inner loss".into()));
        }
        Ok(())
    }
}

/// Multi steepest descent: at every step the candidate update for each norm
/// (own step size, own projection) is evaluated and the per-example winner by
/// inner loss is kept. Ties resolve by the fixed priority l-inf > l2 > l1.
pub fn msd_attack(
    model: &Classifier,
    x: &Array2<f64>,
    y: &[usize],
    budgets: &MsdBudgets,
    seed: u64,
) -> Result<AdversarialBatch> {
    budgets.validate()?;
    check_inputs(x, y)?;
    let inner = budgets.linf.inner_loss;
    let specs = [budgets.linf, budgets.l2, budgets.l1];
    run_restarts(model, x, y, &inner, budgets.linf.restarts, seed, |rng| {
        let mut x_cur = random_start(x, NormKind::Linf, budgets.linf.eps, budgets.linf.init, rng);
        for _ in 0..budgets.linf.steps {
            let grad = input_gradient(model, &inner, &x_cur, y)?;
            let mut candidates = Vec::with_capacity(specs.len());
            for spec in &specs {
                let step = step_direction(&grad, spec.norm, spec.step_size);
                let cand = project_and_clip(x, &x_cur + &step, spec.norm, spec.eps);
                let losses = inner.per_example(&model.forward_probs(&cand)?, y)?;
                candidates.push((cand, losses));
            }
            x_cur = select_candidate_rows(candidates).0;
        }
        Ok(x_cur)
    })
}

/// Row-wise argmax over candidate batches by per-example loss; ties keep the
/// earliest candidate, which encodes the l-inf > l2 > l1 priority. Returns the
/// assembled batch and the winning candidate index per example.
fn select_candidate_rows(candidates: Vec<(Array2<f64>, Vec<f64>)>) -> (Array2<f64>, Vec<usize>) {
    let mut it = candidates.into_iter();
    let (mut best_x, mut best_loss) = it.next().expect("at least one candidate");
    let mut chosen = vec![0usize; best_loss.len()];
    for (c, (cand, losses)) in it.enumerate() {
        for i in 0..best_loss.len() {
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                chosen[i] = c + 1;
                best_x.row_mut(i).assign(&cand.row(i));
            }
        }
    }
    (best_x, chosen)
}

/// Gradient-free baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Gaussian direction scaled to the l2 budget sphere.
    GaussianL2,
    /// Random pixels forced to 0 or 1 within an l1 budget.
    SaltPepperL1,
}

/// Best-of-`trials` random perturbation inside the budget; no gradients used.
pub fn noise_attack(
    model: &Classifier,
    x: &Array2<f64>,
    y: &[usize],
    kind: NoiseKind,
    eps: f64,
    trials: usize,
    inner_loss: InnerLoss,
    seed: u64,
) -> Result<AdversarialBatch> {
    if trials < 1 {
        return Err(MatError::Config("noise attack needs at least one trial".into()));
    }
    if !(eps > 0.0) {
        return Err(MatError::Config(format!("noise budget must be positive, got {eps}")));
    }
    check_inputs(x, y)?;
    let d = x.ncols();
    run_restarts(model, x, y, &inner_loss, trials, seed, |rng| {
        let mut x_t = x.clone();
        match kind {
            NoiseKind::GaussianL2 => {
                for mut row in x_t.rows_mut() {
                    let z: Array1<f64> = Array1::from_shape_simple_fn(d, || gaussian(rng));
                    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        for (v, &zi) in row.iter_mut().zip(z.iter()) {
                            *v += eps * zi / n;
                        }
                    }
                }
                Ok(project_and_clip(x, x_t, NormKind::L2, eps))
            }
            NoiseKind::SaltPepperL1 => {
                for mut row in x_t.rows_mut() {
                    let mut order: Vec<usize> = (0..d).collect();
                    for i in (1..d).rev() {
                        let j = rng.random_range(0..=i);
                        order.swap(i, j);
                    }
                    let mut spent = 0.0;
                    for idx in order {
                        let target = if rng.random_range(0.0..1.0f64) < 0.5 { 0.0 } else { 1.0 };
                        let cost = (target - row[idx]).abs();
                        if spent + cost > eps {
                            break;
                        }
                        spent += cost;
                        row[idx] = target;
                    }
                }
                Ok(x_t)
            }
        }
    })
}

/// Standard normal sample via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random_range(0.0..1.0f64);
    let u2: f64 = rng.random_range(0.0..1.0f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests;
