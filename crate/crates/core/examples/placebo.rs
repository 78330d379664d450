//! Shuffle rule indicators within complexity strata and compare out-of-sample fit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rulegate::cv::{paired_deltas, run_cv, Problem, RuleGating, SplitPlan};
use rulegate::gate::random_params;
use rulegate::rules::placebo_permute;
use rulegate::synth::{generate_synthetic, FeatureMode, SynthConfig};
use rulegate::{RuleId, TrainConfig, GATE_FEATURE_NAMES};

fn main() -> rulegate::Result<()> {
    let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let truth = random_params(&mut ChaCha8Rng::seed_from_u64(9), &RuleId::ALL, &names, 1.0);
    let s = generate_synthetic(
        &truth,
        &SynthConfig {
            n_cells: 20,
            menus_per_cell: 30,
            n_trials: Some(200),
            feature_mode: FeatureMode::Computed,
            ..Default::default()
        },
    )?;
    let targets = s.dataset.targets()?;
    let placebo = placebo_permute(&s.matrix, &s.dataset.menus, 5, 0)?;
    let changed = (0..s.matrix.len())
        .filter(|&i| s.matrix.rows[i] != placebo.rows[i])
        .count();
    println!("placebo changed indicators on {changed} of {} menus", s.matrix.len());

    let plan = SplitPlan {
        n_splits: 4,
        ..Default::default()
    };
    let gating = RuleGating::new(
        &RuleId::ALL,
        TrainConfig {
            epochs: 300,
            ..Default::default()
        },
    );
    let real = run_cv(
        &Problem::new(&s.features, &s.matrix, &targets, None)?,
        &gating,
        &plan,
        &[0.1],
    )?
    .record;
    let fake = run_cv(
        &Problem::new(&s.features, &placebo, &targets, None)?,
        &gating,
        &plan,
        &[0.1],
    )?
    .record;
    println!("real library test MSE {:.5}", real.mean_test_mse);
    println!("placebo library      {:.5}", fake.mean_test_mse);
    println!("per-split placebo - real: {:.5?}", paired_deltas(&real, &fake)?);
    Ok(())
}
