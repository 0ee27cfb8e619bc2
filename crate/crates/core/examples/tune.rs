// Scratch harness for choosing the desk-scale experiment geometry.

use matrain_core::attacks::{pgd_attack, NormKind, PerturbationSpec};
use matrain_core::data::{two_gaussians, Dataset, TwoGaussians};
use matrain_core::losses::{CohortDivisor, LossWeights};
use matrain_core::model::{Classifier, OptimState};
use matrain_core::rng::{fold_key, substream, Stream};
use matrain_core::trainer::{
    train_mat, train_natural, train_scenario, Cohort, MpStrategy, Scenario, TrainConfig,
};
use std::time::Instant;

fn robust_acc(model: &Classifier, data: &Dataset, eps: f64, seed: u64) -> f64 {
    let spec = PerturbationSpec::pgd_linf(eps, 20);
    let adv = pgd_attack(model, &data.inputs, &data.labels, &spec, seed).unwrap();
    model.accuracy(&adv.x_adv, &data.labels).unwrap()
}

fn main() {
    let t0 = Instant::now();
    let arch = std::env::args().nth(1).unwrap_or_else(|| "mlp:2x32".into());
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    for sigma in [0.12, 0.16, 0.20] {
        let geom = TwoGaussians { center_a: (0.3, 0.3), center_b: (0.7, 0.7), sigma };
        let mut stats = vec![Vec::new(); 8];
        for seed in 1..=5u64 {
            let data = two_gaussians(1000, seed, geom).unwrap();
            let gap = data.class_gap().unwrap();
            let eps = 0.1 * gap;
            let splits = data.split_fractions(&[0.8, 0.2], seed).unwrap();
            let (train, test) = (&splits[0], &splits[1]);

            let cfg = TrainConfig {
                epochs,
                batch_size: 64,
                optim: OptimState::new(lr, 0.9, 0.0).unwrap(),
                weights: LossWeights {
                    alpha: 0.6,
                    detach_teacher: false,
                    cohort_divisor: CohortDivisor::NMinus1,
                },
                attack: PerturbationSpec::new(NormKind::Linf, eps, 2.5 * eps / 7.0, 7),
                scenario: Scenario::RobRobOnline,
                strategy: MpStrategy::None,
                seed,
                augment: None,
                checkpoint_every: None,
                out_dir: None,
                mp_peers_include_generalist: false,
            };

            let mut cohort = Cohort::peers(&arch, data.shape, 2, &cfg.optim, seed, 2).unwrap();
            let naturals: Vec<Classifier> =
                cohort.members.iter().map(|m| m.model.clone()).collect();
            train_mat(&mut cohort, train, &cfg).unwrap();

            let eseed = fold_key(seed, Stream::Eval, &[0]);
            for (i, member) in cohort.members.iter().enumerate() {
                stats[i].push(robust_acc(&member.model, test, eps, eseed));
            }
            for (i, nat) in naturals.iter().enumerate() {
                let mut m = nat.clone();
                let mut opt = cfg.optim.clone();
                train_natural(&mut m, &mut opt, train, &cfg).unwrap();
                stats[2 + i].push(robust_acc(&m, test, eps, eseed));
                if i == 0 {
                    stats[6].push(m.accuracy(&test.inputs, &test.labels).unwrap());
                }
            }
            stats[4].push(cohort.members[0].model.accuracy(&test.inputs, &test.labels).unwrap());

            // Offline comparison: teacher = trained h1 frozen, fresh student.
            let off_cfg = TrainConfig { scenario: Scenario::RobRobOffline, ..cfg.clone() };
            let student = {
                let mut rng = substream(seed, Stream::Init, &[1]);
                Classifier::new(&arch, data.shape, 2, &mut rng).unwrap()
            };
            let (off, _) = train_scenario(
                cohort.members[0].model.clone(),
                student,
                off_cfg.optim.clone(),
                off_cfg.optim.clone(),
                train,
                &off_cfg,
            )
            .unwrap();
            stats[5].push(robust_acc(&off.members[1].model, test, eps, eseed));
            stats[7].push(gap);
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "sigma {sigma:.2} | MAT rob h1 {:.3} h2 {:.3} | NAT rob h1 {:.3} h2 {:.3} | MAT clean {:.3} NAT clean {:.3} | offline rob {:.3} | gap {:.3} | {:?}",
            mean(&stats[0]), mean(&stats[1]), mean(&stats[2]), mean(&stats[3]),
            mean(&stats[4]), mean(&stats[6]), mean(&stats[5]), mean(&stats[7]), t0.elapsed()
        );
    }
}
