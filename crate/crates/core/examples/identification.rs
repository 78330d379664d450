//! Check the rank conditions on a synthetic corpus with exact feature cells.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rulegate::gate::random_params;
use rulegate::identification::{ident_report, jacobian_local_rank, IdentConfig};
use rulegate::synth::{generate_synthetic, SynthConfig};
use rulegate::{RuleId, GATE_FEATURE_NAMES};

fn main() -> rulegate::Result<()> {
    let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let truth = random_params(&mut ChaCha8Rng::seed_from_u64(3), &RuleId::ALL, &names, 0.5);
    // Noiseless rates, 13 cells sharing a feature vector each.
    let s = generate_synthetic(&truth, &SynthConfig::default())?;
    let (report, _) = ident_report(&s.dataset.menus, &s.matrix, &s.features, &IdentConfig::default())?;
    print!("{}", report.to_text());

    let local = jacobian_local_rank(&truth, &s.features, &s.matrix, RuleId::A1)?;
    println!("local Jacobian at the truth: {local:?}");
    Ok(())
}
