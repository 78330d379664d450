//! Gate features, the raw menu encoding and the complexity covariates.

use rulegate::features::{menu_covariates, raw_encoding, rescale_factor, Encoding};
use rulegate::{FeatureSet, Lottery, Menu, GATE_FEATURE_NAMES};

fn main() -> rulegate::Result<()> {
    let menus = vec![
        Menu::unlabeled("a", Lottery::new(&[0.0, 10.0], &[0.5, 0.5])?, Lottery::degenerate(4.0)),
        Menu::unlabeled(
            "b",
            Lottery::new(&[-20.0, 30.0, 60.0], &[0.2, 0.5, 0.3])?,
            Lottery::new(&[5.0, 25.0], &[0.7, 0.3])?,
        ),
    ];
    let factor = rescale_factor(&menus)?;
    println!("outcome rescale factor: {factor}");

    let gate = FeatureSet::compute(&menus, factor, Encoding::Gate);
    for (i, m) in menus.iter().enumerate() {
        println!("menu {}:", m.id);
        for (name, v) in GATE_FEATURE_NAMES.iter().zip(gate.row(i)) {
            println!("  {name:<14} {v:>9.4}");
        }
        let c = menu_covariates(m);
        println!("  tradeoff complexity {:.4}, risk asymmetry {:.4}", c.tc, c.risk_asym);
        let raw = raw_encoding(m, factor);
        println!("  raw encoding has {} slots, first four {:?}", raw.len(), &raw[..4]);
    }
    Ok(())
}
