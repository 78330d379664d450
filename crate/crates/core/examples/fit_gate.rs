//! Train the gate on synthetic menus and summarise rule usage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rulegate::diagnostics::concentration;
use rulegate::gate::{random_params, responsibilities, train, Batch};
use rulegate::synth::{generate_synthetic, FeatureMode, SynthConfig};
use rulegate::{RuleId, TrainConfig, GATE_FEATURE_NAMES};

fn main() -> rulegate::Result<()> {
    let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let truth = random_params(&mut ChaCha8Rng::seed_from_u64(7), &RuleId::ALL, &names, 0.5);
    let s = generate_synthetic(
        &truth,
        &SynthConfig {
            n_cells: 20,
            menus_per_cell: 40,
            n_trials: Some(200),
            feature_mode: FeatureMode::Computed,
            ..Default::default()
        },
    )?;
    let targets = s.dataset.targets()?;
    let rows: Vec<usize> = (0..targets.len()).collect();
    let batch = Batch {
        features: &s.features,
        matrix: &s.matrix,
        rows: &rows,
        targets: &targets,
    };
    let fit = train(&RuleId::ALL, &batch, &TrainConfig::default())?;
    println!(
        "{} menus, training MSE {:.5} -> {:.5}",
        targets.len(),
        fit.trace[0],
        fit.trace.last().unwrap()
    );

    let fitted = responsibilities(&fit.params, &s.features, &s.matrix);
    let generating = responsibilities(&truth, &s.features, &s.matrix);
    println!("{:<8}{:>10}{:>10}", "rule", "fitted", "truth");
    for r in RuleId::ALL {
        println!(
            "{:<8}{:>10.3}{:>10.3}",
            r.name(),
            fitted.w[r.index()],
            generating.w[r.index()]
        );
    }
    let c = concentration(&fitted.w)?;
    println!("HHI {:.3}, effective number of rules {:.2}", c.hhi, c.n_eff);
    Ok(())
}
