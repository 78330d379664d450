//! Evaluate the twelve rules on a few menus and print which side each one takes.

use rulegate::rules::{big_m_for, evaluate_rule};
use rulegate::{Activity, Lottery, Menu, RuleId};

fn main() -> rulegate::Result<()> {
    let menus = vec![
        Menu::unlabeled(
            "coin vs sure 1",
            Lottery::new(&[0.0, 10.0], &[0.5, 0.5])?,
            Lottery::degenerate(1.0),
        ),
        Menu::unlabeled(
            "long shot vs modest",
            Lottery::new(&[0.0, 40.0], &[0.9, 0.1])?,
            Lottery::new(&[2.0, 6.0], &[0.5, 0.5])?,
        ),
        Menu::unlabeled(
            "loss-exposed",
            Lottery::new(&[-10.0, 5.0, 8.0], &[0.1, 0.6, 0.3])?,
            Lottery::new(&[3.0, 4.0], &[0.5, 0.5])?,
        ),
    ];
    let big_m = big_m_for(&menus);

    print!("{:<22}", "menu");
    for r in RuleId::ALL {
        print!("{:>7}", r.name());
    }
    println!();
    for m in &menus {
        print!("{:<22}", m.id);
        for r in RuleId::ALL {
            let o = evaluate_rule(r, m, Activity::default(), big_m);
            let cell = match (o.active, o.left) {
                (false, _) => ".",
                (true, true) => "L",
                (true, false) => "R",
            };
            print!("{cell:>7}");
        }
        println!();
    }

    // With every rule forced active, abstentions become right recommendations.
    let forced = evaluate_rule(RuleId::DIS, &menus[0], Activity::AllActive, big_m);
    println!("DIS on the first menu when forced active: {forced:?}");
    Ok(())
}
