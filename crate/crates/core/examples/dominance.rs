//! Compare lotteries by first-order stochastic dominance.

use rulegate::{fsd_compare, Lottery};

fn main() -> rulegate::Result<()> {
    let safe = Lottery::new(&[3.0], &[1.0])?;
    let coin = Lottery::new(&[0.0, 10.0], &[0.5, 0.5])?;
    let better_coin = Lottery::new(&[1.0, 10.0], &[0.5, 0.5])?;

    println!("coin vs better coin:      {:?}", fsd_compare(&coin, &better_coin, 0.0));
    println!("safe vs coin:             {:?}", fsd_compare(&safe, &coin, 0.0));
    println!("coin vs itself:           {:?}", fsd_compare(&coin, &coin, 0.0));

    // A gap requirement: survival functions must differ by at least epsilon.
    let nearly = Lottery::new(&[0.0, 10.0], &[0.48, 0.52])?;
    for eps in [0.0, 0.01, 0.05] {
        println!("coin vs nearly, eps {eps:<4}: {:?}", fsd_compare(&coin, &nearly, eps));
    }

    // Duplicate outcomes are merged and sorted on construction.
    let messy = Lottery::new(&[5.0, -1.0, 5.0], &[0.25, 0.5, 0.25])?;
    println!("canonical: {:?} with {:?}", messy.outcomes(), messy.probs());
    Ok(())
}
