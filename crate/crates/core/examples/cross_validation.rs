//! Two-pass cross-validation with learning-rate selection, a constant baseline
//! and a learning curve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rulegate::cv::{learning_curve, paired_deltas, run_cv, ConstantPredictor, Problem, RuleGating, SplitPlan};
use rulegate::gate::random_params;
use rulegate::synth::{generate_synthetic, FeatureMode, SynthConfig};
use rulegate::{RuleId, TrainConfig, GATE_FEATURE_NAMES};

fn main() -> rulegate::Result<()> {
    let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let truth = random_params(&mut ChaCha8Rng::seed_from_u64(11), &RuleId::ALL, &names, 0.5);
    let s = generate_synthetic(
        &truth,
        &SynthConfig {
            n_cells: 20,
            menus_per_cell: 30,
            n_trials: Some(100),
            feature_mode: FeatureMode::Computed,
            ..Default::default()
        },
    )?;
    let targets = s.dataset.targets()?;
    let trials = s.dataset.trial_counts();
    let problem = Problem::new(&s.features, &s.matrix, &targets, trials.as_deref())?;
    let plan = SplitPlan {
        n_splits: 5,
        ..Default::default()
    };
    let train = TrainConfig {
        epochs: 300,
        ..Default::default()
    };
    let gating = RuleGating::new(&RuleId::ALL, train.clone());

    let run = run_cv(&problem, &gating, &plan, &train.lr_grid)?;
    let constant = run_cv(&problem, &ConstantPredictor, &plan, &train.lr_grid)?;
    let r = &run.record;
    println!(
        "rule gating: lr {} test MSE {:.5} (sd {:.5}), trial-weighted {:?}",
        r.selected_lr, r.mean_test_mse, r.sd_test_mse, r.mean_test_mse_w
    );
    println!("constant:    test MSE {:.5}", constant.record.mean_test_mse);
    let delta = paired_deltas(&constant.record, r)?;
    println!("per-split rule gating - constant: {delta:.5?}");

    for p in learning_curve(&problem, &gating, &plan, &[0.25, 0.5, 1.0], r.selected_lr)? {
        println!(
            "fraction {:.2}: {} menus, test MSE {:.5}",
            p.fraction, p.n_fit, p.mean_test_mse
        );
    }
    Ok(())
}
