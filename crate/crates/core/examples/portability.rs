//! Freeze a fitted gate and score it on a second dataset at menu and trial level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rulegate::cv::{frozen_features, portability};
use rulegate::data::TrialRecord;
use rulegate::gate::{random_params, train, Batch};
use rulegate::synth::{generate_synthetic, FeatureMode, SynthConfig};
use rulegate::{Activity, RuleId, TrainConfig, GATE_FEATURE_NAMES};

fn main() -> rulegate::Result<()> {
    let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let truth = random_params(&mut ChaCha8Rng::seed_from_u64(2), &RuleId::ALL, &names, 0.5);
    let config = |seed| SynthConfig {
        n_cells: 15,
        menus_per_cell: 30,
        n_trials: Some(50),
        feature_mode: FeatureMode::Computed,
        seed,
        ..Default::default()
    };
    let source = generate_synthetic(&truth, &config(1))?;
    let targets = source.dataset.targets()?;
    let rows: Vec<usize> = (0..targets.len()).collect();
    let fit = train(
        &RuleId::ALL,
        &Batch {
            features: &source.features,
            matrix: &source.matrix,
            rows: &rows,
            targets: &targets,
        },
        &TrainConfig::default(),
    )?;

    // A second corpus with individual choices expanded from its aggregate rates.
    let mut target = generate_synthetic(&truth, &config(2))?.dataset;
    let mut trials = Vec::new();
    for (i, m) in target.menus.iter().enumerate() {
        let n = m.n_trials.unwrap_or(0);
        let left = (m.choice_rate.unwrap_or(0.0) * n as f64).round() as u32;
        trials.extend((0..n).map(|t| TrialRecord {
            menu: i,
            chose_left: t < left,
        }));
    }
    target.trials = Some(trials);

    // Features for the new menus use the scale frozen in the fitted gate.
    let features = frozen_features(&fit.params, &target);
    let r = portability(&fit.params, &target, &features, Activity::default())?;
    println!(
        "{} menus / {} trials: MSE_menu {:.5}, Brier {:.4}, log-loss {:.4}",
        r.n_menus, r.n_trials, r.mse_menu, r.brier_trial, r.logloss_trial
    );
    Ok(())
}
