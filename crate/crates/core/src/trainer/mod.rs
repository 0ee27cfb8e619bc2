//! Training loops: two-network and N-network mutual adversarial training,
//! the four online/offline distillation scenarios, multi-perturbation
//! specialist/generalist ensembles, and single-model baselines.
//!
//! Determinism contract: every random draw (init, shuffling, augmentation,
//! attack starts) flows from the run seed through substreams keyed by
//! `(purpose, epoch, batch, network, attack-slot)`. Networks therefore never
//! contend for a shared stream: dropping a network from a cohort does not
//! change the randomness any other network sees.

mod multi;
mod sweep;

pub use multi::{train_at_multi, train_mat_mp, train_natural};
pub use sweep::{alpha_sweep, SweepRow};

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, PerturbationSpec};
use crate::data::{augment, save_checkpoint, AugmentOps, Dataset};
use crate::error::{MatError, Result};
use crate::losses::{mat_cohort_loss_with_grads, LossWeights};
use crate::model::{sgd_step, Classifier, ForwardTrace, OptimState};
use crate::rng::{fold_key, substream, Stream};

/// Position of a network inside a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Peer,
    /// Specialist for perturbation type `m` (1-based, matching its member
    /// position after the generalist).
    Specialist(usize),
    Generalist,
}

/// One network plus its training state and flags.
#[derive(Debug, Clone)]
pub struct Member {
    pub name: String,
    pub model: Classifier,
    pub optim: OptimState,
    pub role: Role,
    /// Attack generating this member's own adversarial examples; falls back
    /// to the config-level attack when absent.
    pub attack: Option<PerturbationSpec>,
    pub trainable: bool,
    /// When false the member is a natural model: its "adversarial" input is
    /// the clean batch.
    pub adversarial: bool,
}

impl Member {
    pub fn new(name: impl Into<String>, model: Classifier, optim: OptimState) -> Self {
        Member {
            name: name.into(),
            model,
            optim,
            role: Role::Peer,
            attack: None,
            trainable: true,
            adversarial: true,
        }
    }
}

/// An ordered set of networks trained together.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub members: Vec<Member>,
}

impl Cohort {
    pub fn new(members: Vec<Member>) -> Result<Self> {
        let cohort = Cohort { members };
        cohort.validate()?;
        Ok(cohort)
    }

    /// A cohort of `n` peers of the same architecture with independently
    /// seeded initializations.
    pub fn peers(
        arch: &str,
        shape: crate::model::InputShape,
        classes: usize,
        optim: &OptimState,
        seed: u64,
        n: usize,
    ) -> Result<Self> {
        if n < 2 {
            return Err(MatError::Config(format!("a cohort needs at least 2 peers, got {n}")));
        }
        let members = (0..n)
            .map(|i| {
                let mut rng = substream(seed, Stream::Init, &[i as u64]);
                Ok(Member::new(
                    format!("h{}", i + 1),
                    Classifier::new(arch, shape, classes, &mut rng)?,
                    optim.clone(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Cohort::new(members)
    }

    /// Generalist-plus-specialists ensemble: member 0 is the generalist, and
    /// specialist `m` (members 1..=M) binds to `specs[m-1]`.
    pub fn specialists(
        arch: &str,
        shape: crate::model::InputShape,
        classes: usize,
        optim: &OptimState,
        seed: u64,
        specs: &[PerturbationSpec],
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(MatError::Config("a specialist ensemble needs at least one attack type".into()));
        }
        let mut members = Vec::with_capacity(specs.len() + 1);
        let mut rng = substream(seed, Stream::Init, &[0]);
        let mut generalist = Member::new("h0", Classifier::new(arch, shape, classes, &mut rng)?, optim.clone());
        generalist.role = Role::Generalist;
        members.push(generalist);
        for (m, spec) in specs.iter().enumerate() {
            let mut rng = substream(seed, Stream::Init, &[m as u64 + 1]);
            let mut member = Member::new(
                format!("h{}", m + 1),
                Classifier::new(arch, shape, classes, &mut rng)?,
                optim.clone(),
            );
            member.role = Role::Specialist(m + 1);
            member.attack = Some(*spec);
            members.push(member);
        }
        Cohort::new(members)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(MatError::Config("cohort is empty".into()));
        }
        let specialists: Vec<usize> = self
            .members
            .iter()
            .filter_map(|m| match m.role {
                Role::Specialist(i) => Some(i),
                _ => None,
            })
            .collect();
        let generalists = self.members.iter().filter(|m| m.role == Role::Generalist).count();
        if !specialists.is_empty() {
            if generalists != 1 {
                return Err(MatError::Config(format!(
                    "an ensemble with specialists needs exactly one generalist, found {generalists}"
                )));
            }
            let mut sorted = specialists.clone();
            sorted.sort_unstable();
            let expected: Vec<usize> = (1..=specialists.len()).collect();
            if sorted != expected {
                return Err(MatError::Config(format!(
                    "specialist indices must be a bijection with 1..=M, found {sorted:?}"
                )));
            }
            for m in &self.members {
                if matches!(m.role, Role::Specialist(_)) && m.attack.is_none() {
                    return Err(MatError::Config(format!(
                        "specialist {} has no bound perturbation type",
                        m.name
                    )));
                }
            }
        } else if generalists > 0 {
            return Err(MatError::Config("a generalist requires specialist peers".into()));
        }
        Ok(())
    }

    pub fn models(&self) -> Vec<&Classifier> {
        self.members.iter().map(|m| &m.model).collect()
    }
}

/// Which distillation scenario a two-network run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Both networks robust, trained simultaneously.
    RobRobOnline,
    /// Robust teacher frozen, robust student learns from it.
    RobRobOffline,
    /// Natural and robust network trained simultaneously.
    NatRobOnline,
    /// Natural teacher frozen, robust student learns from it.
    NatRobOffline,
}

/// Generalist training strategy for multi-perturbation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpStrategy {
    Avg,
    Max,
    Msd,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimState,
    pub weights: LossWeights,
    /// Default training attack for members without their own.
    pub attack: PerturbationSpec,
    pub scenario: Scenario,
    pub strategy: MpStrategy,
    pub seed: u64,
    #[serde(default)]
    pub augment: Option<AugmentOps>,
    /// When set together with `out_dir`, checkpoints are written every this
    /// many epochs (and always at the end).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Whether the generalist's clean prediction joins the specialists'
    /// teacher sets in multi-perturbation training.
    #[serde(default)]
    pub mp_peers_include_generalist: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MatError::Config("training needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(MatError::Config("batch size must be positive".into()));
        }
        self.weights.validate()?;
        self.attack.validate()
    }
}

/// Per-epoch diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Batch-mean of the joint training objective.
    pub total_loss: f64,
    /// Batch-mean classification term per member.
    pub member_at: Vec<f64>,
    /// Batch-mean distillation term per member (raw, undivided).
    pub member_kd: Vec<f64>,
    /// Clean training-set accuracy per member at epoch end.
    pub clean_accuracy: Vec<f64>,
}

/// Everything needed to re-launch and audit a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// TOML snapshot of the training configuration.
    pub config: String,
    pub seed: u64,
    pub member_names: Vec<String>,
    pub curves: Vec<EpochStats>,
    /// Per-member loss at every minibatch step, `[member][step]`.
    pub step_losses: Vec<Vec<f64>>,
    /// Joint objective at every minibatch step.
    pub step_totals: Vec<f64>,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    fn new(cfg: &TrainConfig, names: Vec<String>) -> Result<Self> {
        Ok(RunManifest {
            config: toml::to_string(cfg).map_err(|e| MatError::Config(format!("config snapshot: {e}")))?,
            seed: cfg.seed,
            member_names: names,
            curves: Vec::new(),
            step_losses: Vec::new(),
            step_totals: Vec::new(),
            wall_clock_secs: 0.0,
            artifacts: Vec::new(),
        })
    }
}

/// Deterministic minibatches for one epoch: seeded shuffle, optional
/// augmentation keyed by `(epoch, batch)`.
pub(crate) fn epoch_batches(
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<(Array2<f64>, Vec<usize>)>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = substream(cfg.seed, Stream::Shuffle, &[epoch as u64]);
    crate::data::shuffle(&mut order, &mut rng);
    let mut batches = Vec::new();
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let x = Array2::from_shape_fn((chunk.len(), data.inputs.ncols()), |(i, j)| {
            data.inputs[[chunk[i], j]]
        });
        let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let x = match (&cfg.augment, data.shape.is_image()) {
            (Some(ops), true) => {
                let mut arng = substream(cfg.seed, Stream::Augment, &[epoch as u64, b as u64]);
                augment(&x, data.shape, *ops, &mut arng)?
            }
            (Some(ops), false) if ops.pad > 0 => {
                return Err(MatError::Config(
                    "crop augmentation requires image-shaped inputs".into(),
                ))
            }
            _ => x,
        };
        batches.push((x, y));
    }
    Ok(batches)
}

/// Generate this member's adversarial inputs for one minibatch. `slot`
/// distinguishes multiple attacks against the same network in one step.
pub(crate) fn member_attack_inputs(
    member: &Member,
    cfg: &TrainConfig,
    x: &Array2<f64>,
    y: &[usize],
    epoch: usize,
    batch: usize,
    net: usize,
    slot: usize,
) -> Result<Array2<f64>> {
    if !member.adversarial {
        return Ok(x.clone());
    }
    let spec = member.attack.as_ref().unwrap_or(&cfg.attack);
    let seed = fold_key(
        cfg.seed,
        Stream::Attack,
        &[epoch as u64, batch as u64, net as u64, slot as u64],
    );
    Ok(pgd_attack(&member.model, x, y, spec, seed)?.x_adv)
}

pub(crate) fn accumulate_grads(acc: &mut Vec<ArrayD<f64>>, extra: Vec<ArrayD<f64>>) {
    if acc.is_empty() {
        *acc = extra;
    } else {
        for (a, e) in acc.iter_mut().zip(extra) {
            *a += &e;
        }
    }
}

/// Fail a step whose loss is non-finite, before any parameter update.
pub(crate) fn abort_on_nonfinite(
    total: f64,
    cohort: &Cohort,
    cfg: &TrainConfig,
    epoch: usize,
    what: &str,
) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(abort_with_checkpoints(cohort, cfg, epoch, what))
    }
}

/// Emergency checkpoints on a non-finite loss; parameters are still the last
/// good state because the step is refused before any update.
fn abort_with_checkpoints(cohort: &Cohort, cfg: &TrainConfig, epoch: usize, what: &str) -> MatError {
    let mut note = String::new();
    if let Some(dir) = &cfg.out_dir {
        for member in &cohort.members {
            let path = dir.join(format!("{}-abort.ckpt", member.name));
            if save_checkpoint(&member.model, &member.optim, epoch, cfg.seed, &path).is_ok() {
                note.push_str(&format!(" {}", path.display()));
            }
        }
    }
    MatError::Numeric(format!(
        "non-finite loss at epoch {epoch} ({what}); last good state{}",
        if note.is_empty() { " kept in memory".to_string() } else { format!(" checkpointed:{note}") }
    ))
}

pub(crate) fn write_checkpoints(
    cohort: &Cohort,
    cfg: &TrainConfig,
    epoch: usize,
    manifest: &mut RunManifest,
    tag: Option<usize>,
) -> Result<()> {
    if let Some(dir) = &cfg.out_dir {
        for member in &cohort.members {
            let file = match tag {
                Some(e) => format!("{}-e{}.ckpt", member.name, e),
                None => format!("{}.ckpt", member.name),
            };
            let path = dir.join(file);
            save_checkpoint(&member.model, &member.optim, epoch, cfg.seed, &path)?;
            manifest.artifacts.push(path.display().to_string());
        }
    }
    Ok(())
}

/// Mutual adversarial training over a cohort of peers, starting at
/// `start_epoch` (1-based; pass 1 for a fresh run, or a checkpoint's epoch
/// plus one to resume).
///
/// Each minibatch: generate every member's adversarial examples against its
/// frozen current parameters, compute the cohort loss on adversarial and
/// clean outputs, then update every trainable member from the same backward
/// pass.
pub fn train_mat_from(
    cohort: &mut Cohort,
    data: &Dataset,
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<RunManifest> {
    cfg.validate()?;
    cohort.validate()?;
    if cohort.members.len() < 2 {
        return Err(MatError::Config("mutual training needs at least two networks".into()));
    }
    if cohort.members.iter().any(|m| matches!(m.role, Role::Specialist(_) | Role::Generalist)) {
        return Err(MatError::Config(
            "mutual peer training does not take specialist/generalist roles".into(),
        ));
    }
    if data.is_empty() {
        return Err(MatError::Config("training dataset is empty".into()));
    }

    let start = Instant::now();
    let n = cohort.members.len();
    let mut manifest = RunManifest::new(cfg, cohort.members.iter().map(|m| m.name.clone()).collect())?;
    manifest.step_losses = vec![Vec::new(); n];

    for epoch in start_epoch..=cfg.epochs {
        let mut epoch_total = 0.0;
        let mut epoch_at = vec![0.0; n];
        let mut epoch_kd = vec![0.0; n];
        let batches = epoch_batches(data, cfg, epoch)?;
        let batch_count = batches.len();
        for (b, (x, y)) in batches.into_iter().enumerate() {
            // Attacks run against fixed parameters, before any update.
            let mut adv_inputs = Vec::with_capacity(n);
            for (i, member) in cohort.members.iter().enumerate() {
                adv_inputs.push(member_attack_inputs(member, cfg, &x, &y, epoch, b, i, 0)?);
            }
            let mut clean_traces = Vec::with_capacity(n);
            let mut adv_traces = Vec::with_capacity(n);
            for (member, adv) in cohort.members.iter().zip(&adv_inputs) {
                clean_traces.push(member.model.forward_trace(&x)?);
                adv_traces.push(member.model.forward_trace(adv)?);
            }
            let adv_probs: Vec<_> = adv_traces.iter().map(ForwardTrace::probs).collect();
            let clean_probs: Vec<_> = clean_traces.iter().map(ForwardTrace::probs).collect();

            let (breakdown, grads) =
                mat_cohort_loss_with_grads(&adv_probs, &clean_probs, &y, &cfg.weights)?;
            abort_on_nonfinite(breakdown.total, cohort, cfg, epoch, "cohort loss")?;

            for i in 0..n {
                let member_loss = (1.0 - breakdown.alpha) * breakdown.at_terms[i]
                    + breakdown.alpha / breakdown.kd_divisor * breakdown.kd_terms[i];
                manifest.step_losses[i].push(member_loss);
                epoch_at[i] += breakdown.at_terms[i] / batch_count as f64;
                epoch_kd[i] += breakdown.kd_terms[i] / batch_count as f64;
                if !cohort.members[i].trainable {
                    continue;
                }
                let mut acc: Vec<ArrayD<f64>> = Vec::new();
                let (pg, _) = cohort.members[i].model.backward(&adv_traces[i], &grads.d_adv[i])?;
                accumulate_grads(&mut acc, pg);
                if grads.d_clean[i].iter().any(|&v| v != 0.0) {
                    let (pg, _) = cohort.members[i].model.backward(&clean_traces[i], &grads.d_clean[i])?;
                    accumulate_grads(&mut acc, pg);
                }
                let member = &mut cohort.members[i];
                sgd_step(&mut member.model, &mut member.optim, &acc, epoch)?;
            }
            manifest.step_totals.push(breakdown.total);
            epoch_total += breakdown.total / batch_count as f64;
        }

        let clean_accuracy = cohort
            .members
            .iter()
            .map(|m| m.model.accuracy(&data.inputs, &data.labels))
            .collect::<Result<Vec<_>>>()?;
        manifest.curves.push(EpochStats {
            epoch,
            total_loss: epoch_total,
            member_at: epoch_at,
            member_kd: epoch_kd,
            clean_accuracy,
        });
        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && epoch % every == 0 && epoch != cfg.epochs {
                write_checkpoints(cohort, cfg, epoch, &mut manifest, Some(epoch))?;
            }
        }
    }
    write_checkpoints(cohort, cfg, cfg.epochs, &mut manifest, None)?;
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(manifest)
}

/// Fresh mutual adversarial training run over a cohort of robust peers.
pub fn train_mat(cohort: &mut Cohort, data: &Dataset, cfg: &TrainConfig) -> Result<RunManifest> {
    if cfg.scenario != Scenario::RobRobOnline {
        return Err(MatError::Config(
            "cohort peer training runs the rob-rob-online scenario; use train_scenario otherwise".into(),
        ));
    }
    if cohort.members.iter().any(|m| !m.trainable || !m.adversarial) {
        return Err(MatError::Config(
            "rob-rob-online requires every member trainable and adversarial".into(),
        ));
    }
    train_mat_from(cohort, data, cfg, 1)
}

/// Two-network training under any of the four distillation scenarios. The
/// first model is the partner/teacher, the second the robust student. For
/// offline scenarios the partner must be pretrained; it is frozen here.
pub fn train_scenario(
    partner: Classifier,
    student: Classifier,
    partner_optim: OptimState,
    student_optim: OptimState,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Cohort, RunManifest)> {
    let mut h1 = Member::new("h1", partner, partner_optim);
    let h2 = Member::new("h2", student, student_optim);
    match cfg.scenario {
        Scenario::RobRobOnline => {}
        Scenario::RobRobOffline => {
            h1.trainable = false;
        }
        Scenario::NatRobOnline => {
            h1.adversarial = false;
        }
        Scenario::NatRobOffline => {
            h1.trainable = false;
            h1.adversarial = false;
        }
    }
    let mut cohort = Cohort::new(vec![h1, h2])?;
    let manifest = train_mat_from(&mut cohort, data, cfg, 1)?;
    Ok((cohort, manifest))
}
