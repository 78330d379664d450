//! Ablation, cross-fitted top-k selection, comparative statics and restrictiveness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rulegate::cv::{ConstantPredictor, Problem, RuleGating, SplitPlan};
use rulegate::diagnostics::{
    ablate, comparative_statics, crossfit_topk, restrictiveness, Covariate, Selection, WeightKind,
};
use rulegate::gate::random_params;
use rulegate::synth::{generate_synthetic, FeatureMode, SynthConfig};
use rulegate::{RuleId, TrainConfig, GATE_FEATURE_NAMES};

fn main() -> rulegate::Result<()> {
    let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let truth = random_params(&mut ChaCha8Rng::seed_from_u64(5), &RuleId::ALL, &names, 0.8);
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
    let problem = Problem::new(&s.features, &s.matrix, &targets, None)?;
    let plan = SplitPlan {
        n_splits: 4,
        ..Default::default()
    };
    let train = TrainConfig {
        epochs: 300,
        ..Default::default()
    };
    let gating = RuleGating::new(&RuleId::ALL, train);

    let abl = ablate(
        &problem,
        &gating,
        &[RuleId::SAL, RuleId::REG, RuleId::MMa],
        &plan,
        &[0.01, 0.1],
    )?;
    println!("full-library test MSE {:.5}, N_eff {:.2}", abl.full_mse, abl.full_n_eff);
    for e in &abl.entries {
        println!(
            "  drop {:<6} phi {:+.4}  sigma_N {:+.3}",
            e.rule.name(),
            e.phi,
            e.sigma_n
        );
    }

    let cf = crossfit_topk(&problem, &gating, &plan, 0.1, &[2, 4, 12], Selection::Rules)?;
    for row in &cf.rows {
        println!(
            "  top-{:<2} test MSE {:.5}, retention {:.1}%",
            row.k, row.mean_mse, row.retention
        );
    }

    let statics = comparative_statics(&truth, &s.dataset.menus, &s.features, &s.matrix, Covariate::Tc, 4)?;
    println!("generating REG weight across complexity bins:");
    for row in statics
        .rows
        .iter()
        .filter(|r| r.rule == RuleId::REG && r.kind == WeightKind::Effective)
    {
        println!(
            "  bin {} (tc {:.3}): {:.3}",
            row.bin, row.covariate_mean, row.mean_weight
        );
    }

    let model = restrictiveness(&problem, &gating, &plan, 1, 0.1, 0)?;
    let constant = restrictiveness(&problem, &ConstantPredictor, &plan, 1, 0.1, 0)?;
    println!(
        "restrictiveness: rule gating {:.3}, constant {:.3} ({} menus; approaches 1 as menus grow)",
        model.ratio,
        constant.ratio,
        targets.len()
    );
    Ok(())
}
