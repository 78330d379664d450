use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rulegate::cv::{Problem, RuleGating, SplitPlan};
use rulegate::diagnostics::ablate;
use rulegate::gate::random_params;
use rulegate::synth::{generate_synthetic, FeatureMode, SynthConfig};
use rulegate::{RuleId, RuleOutcome, TrainConfig, GATE_FEATURE_NAMES};

#[test]
fn dropping_a_never_active_rule_leaves_predictions_unchanged() {
    let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = random_params(&mut rng, &RuleId::ALL, &names, 0.5);
    let mut s = generate_synthetic(
        &truth,
        &SynthConfig {
            n_cells: 6,
            menus_per_cell: 15,
            feature_mode: FeatureMode::Computed,
            ..Default::default()
        },
    )
    .unwrap();
    for row in &mut s.matrix.rows {
        row[RuleId::DIS.index()] = RuleOutcome::INACTIVE;
    }
    let targets = s.dataset.targets().unwrap();
    let problem = Problem::new(&s.features, &s.matrix, &targets, None).unwrap();
    let plan = SplitPlan {
        n_splits: 3,
        ..Default::default()
    };
    let train = TrainConfig {
        epochs: 200,
        ..Default::default()
    };
    let base = RuleGating::new(&RuleId::ALL, train);
    let report = ablate(&problem, &base, &[RuleId::DIS], &plan, &[0.01]).unwrap();
    let e = &report.entries[0];
    // Zero up to rounding: the softmax normalizer still differs by one term.
    assert!(e.phi.abs() < 1e-12, "phi {}", e.phi);
    assert!(e.per_fold_delta.iter().all(|d| d.abs() < 1e-12));
}
