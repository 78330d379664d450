//! The twelve parameter-free decision rules.
//!
//! Each rule turns a menu into a pair of perceived lotteries and speaks only
//! when one of them strictly dominates the other. The result is a
//! [`RuleOutcome`]: an activity bit and, when active, the recommended side.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::decile_bins;
use crate::lottery::{
    canonicalize, contrast, fsd_compare, mode, product_state_space, weighted_median, Dominance, Lottery, Menu,
};

pub const N_RULES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleId {
    MMn,
    MMa,
    MMx,
    MAP,
    SAL,
    SAL2,
    REG,
    REGmed,
    DIS,
    DISmed,
    A1,
    A2,
}

impl RuleId {
    pub const ALL: [RuleId; N_RULES] = [
        RuleId::MMn,
        RuleId::MMa,
        RuleId::MMx,
        RuleId::MAP,
        RuleId::SAL,
        RuleId::SAL2,
        RuleId::REG,
        RuleId::REGmed,
        RuleId::DIS,
        RuleId::DISmed,
        RuleId::A1,
        RuleId::A2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RuleId::MMn => "MMn",
            RuleId::MMa => "MMa",
            RuleId::MMx => "MMx",
            RuleId::MAP => "MAP",
            RuleId::SAL => "SAL",
            RuleId::SAL2 => "SAL2",
            RuleId::REG => "REG",
            RuleId::REGmed => "REGmed",
            RuleId::DIS => "DIS",
            RuleId::DISmed => "DISmed",
            RuleId::A1 => "A1",
            RuleId::A2 => "A2",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, RuleId::A1 | RuleId::A2)
    }

    pub fn family(self) -> Family {
        match self {
            RuleId::MMn | RuleId::MMa | RuleId::MMx | RuleId::MAP => Family::Extremum,
            RuleId::SAL | RuleId::SAL2 => Family::Salience,
            RuleId::REG | RuleId::REGmed => Family::Regret,
            RuleId::DIS | RuleId::DISmed => Family::Disappointment,
            RuleId::A1 | RuleId::A2 => Family::Attention,
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RuleId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RuleId::ALL
            .iter()
            .copied()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown rule {s}")))
    }
}

/// Mechanism families used for family-level library selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    Extremum,
    Salience,
    Regret,
    Disappointment,
    Attention,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Extremum,
        Family::Salience,
        Family::Regret,
        Family::Disappointment,
        Family::Attention,
    ];

    pub fn members(self) -> Vec<RuleId> {
        RuleId::ALL.iter().copied().filter(|r| r.family() == self).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub active: bool,
    pub left: bool,
}

impl RuleOutcome {
    pub const INACTIVE: RuleOutcome = RuleOutcome {
        active: false,
        left: false,
    };

    pub fn decisive_left(self) -> bool {
        self.active && self.left
    }

    pub fn decisive_right(self) -> bool {
        self.active && !self.left
    }
}

/// How activity is decided from the perceived lotteries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activity {
    /// Strict dominance with survival gap at least `epsilon` (0 is plain strict FSD).
    Fsd { epsilon: f64 },
    /// Every rule active on every menu; the side follows plain strict FSD.
    AllActive,
}

impl Default for Activity {
    fn default() -> Self {
        Activity::Fsd { epsilon: 0.0 }
    }
}

impl Activity {
    /// Parses the dominance threshold: negative values switch the discipline off.
    pub fn from_epsilon(epsilon: f64) -> Self {
        if epsilon < 0.0 {
            Activity::AllActive
        } else {
            Activity::Fsd { epsilon }
        }
    }

    pub fn epsilon(self) -> f64 {
        match self {
            Activity::Fsd { epsilon } => epsilon,
            Activity::AllActive => -1.0,
        }
    }
}

fn verdict(left: &Lottery, right: &Lottery, activity: Activity) -> RuleOutcome {
    match activity {
        Activity::Fsd { epsilon } => match fsd_compare(left, right, epsilon) {
            Dominance::LeftStrict => RuleOutcome {
                active: true,
                left: true,
            },
            Dominance::RightStrict => RuleOutcome {
                active: true,
                left: false,
            },
            _ => RuleOutcome::INACTIVE,
        },
        Activity::AllActive => RuleOutcome {
            active: true,
            left: fsd_compare(left, right, 0.0) == Dominance::LeftStrict,
        },
    }
}

fn sure(left: f64, right: f64, activity: Activity) -> RuleOutcome {
    verdict(&Lottery::degenerate(left), &Lottery::degenerate(right), activity)
}

/// The 2x2 grid of extreme pairings in fixed order
/// (min/min, min/max, max/min, max/max), repeats allowed.
fn extreme_pairings(a: &Lottery, b: &Lottery) -> [(f64, f64); 4] {
    [
        (a.min(), b.min()),
        (a.min(), b.max()),
        (a.max(), b.min()),
        (a.max(), b.max()),
    ]
}

fn salience_order(pairs: &[(f64, f64); 4]) -> [(usize, f64); 4] {
    let mut scored: [(usize, f64); 4] = std::array::from_fn(|k| (k, contrast(pairs[k].0, pairs[k].1)));
    // Stable: equal scores keep enumeration order, so the first index wins ties.
    scored.sort_by(|x, y| y.1.total_cmp(&x.1));
    scored
}

fn regret_perceived(a: &Lottery, b: &Lottery) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let states = product_state_space(a, b);
    let regret_left = states.iter().map(|&(x, y, _)| (y - x).max(0.0)).collect();
    let regret_right = states.iter().map(|&(x, y, _)| (x - y).max(0.0)).collect();
    let probs = states.iter().map(|s| s.2).collect();
    (regret_left, regret_right, probs)
}

/// Downside disappointment contrasts below the (upper) mode, sorted descending.
fn disappointment_contrasts(l: &Lottery) -> Vec<f64> {
    let m = mode(l);
    let mut s: Vec<f64> = l
        .outcomes()
        .iter()
        .filter(|&&z| z < m)
        .map(|&z| contrast(m, z))
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

fn disappointment_max(l: &Lottery) -> f64 {
    disappointment_contrasts(l).first().copied().unwrap_or(0.0)
}

fn disappointment_second(l: &Lottery) -> f64 {
    let s = disappointment_contrasts(l);
    if s.len() >= 2 {
        s[1]
    } else {
        s.first().copied().unwrap_or(0.0)
    }
}

/// Evaluate one rule on one menu. `big_m` must exceed every absolute payoff.
pub fn evaluate_rule(rule: RuleId, menu: &Menu, activity: Activity, big_m: f64) -> RuleOutcome {
    let (a, b) = (&menu.left, &menu.right);
    match rule {
        RuleId::MMn => sure(a.min(), b.min(), activity),
        RuleId::MMx => sure(a.max(), b.max(), activity),
        RuleId::MMa => sure(0.5 * (a.min() + a.max()), 0.5 * (b.min() + b.max()), activity),
        RuleId::MAP => sure(mode(a), mode(b), activity),
        RuleId::SAL => {
            let pairs = extreme_pairings(a, b);
            let (k, _) = salience_order(&pairs)[0];
            sure(pairs[k].0, pairs[k].1, activity)
        }
        RuleId::SAL2 => {
            let pairs = extreme_pairings(a, b);
            let order = salience_order(&pairs);
            if order[0].1 == order[1].1 {
                return match activity {
                    Activity::AllActive => RuleOutcome {
                        active: true,
                        left: false,
                    },
                    Activity::Fsd { .. } => RuleOutcome::INACTIVE,
                };
            }
            let k = order[1].0;
            sure(pairs[k].0, pairs[k].1, activity)
        }
        RuleId::REG => {
            let (dl, dr, p) = regret_perceived(a, b);
            let neg = |d: &[f64]| -> Lottery {
                let xs: Vec<f64> = d.iter().map(|v| -v).collect();
                canonicalize(&xs, &p).expect("product measure is a valid lottery")
            };
            verdict(&neg(&dl), &neg(&dr), activity)
        }
        RuleId::REGmed => {
            let (dl, dr, p) = regret_perceived(a, b);
            let ml = weighted_median(&dl, &p).expect("product measure has positive mass");
            let mr = weighted_median(&dr, &p).expect("product measure has positive mass");
            sure(-ml, -mr, activity)
        }
        RuleId::DIS => sure(-disappointment_max(a), -disappointment_max(b), activity),
        RuleId::DISmed => sure(-disappointment_second(a), -disappointment_second(b), activity),
        RuleId::A1 => verdict(a, &Lottery::degenerate(-big_m), activity),
        RuleId::A2 => verdict(&Lottery::degenerate(-big_m), b, activity),
    }
}

/// The penalty payoff used by the attention rules: `10 * max|payoff| + 1`.
pub fn big_m_for(menus: &[Menu]) -> f64 {
    let max_abs = menus.iter().map(Menu::max_abs_payoff).fold(0.0, f64::max);
    10.0 * max_abs + 1.0
}

/// Precomputed activity and recommendation indicators, one row per menu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleMatrix {
    pub menu_ids: Vec<String>,
    pub rows: Vec<[RuleOutcome; N_RULES]>,
    pub activity: Activity,
    pub big_m: f64,
}

pub fn build_rule_matrix(menus: &[Menu], activity: Activity) -> RuleMatrix {
    let big_m = big_m_for(menus);
    let rows = menus
        .iter()
        .map(|menu| RuleId::ALL.map(|r| evaluate_rule(r, menu, activity, big_m)))
        .collect();
    RuleMatrix {
        menu_ids: menus.iter().map(|m| m.id.clone()).collect(),
        rows,
        activity,
        big_m,
    }
}

impl RuleMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, menu: usize, rule: RuleId) -> RuleOutcome {
        self.rows[menu][rule.index()]
    }

    /// Number of menus on which each rule is active.
    pub fn activity_counts(&self) -> [usize; N_RULES] {
        let mut counts = [0; N_RULES];
        for row in &self.rows {
            for (c, o) in counts.iter_mut().zip(row) {
                *c += o.active as usize;
            }
        }
        counts
    }

    /// Number of menus on which each rule is active and recommends left.
    pub fn left_counts(&self) -> [usize; N_RULES] {
        let mut counts = [0; N_RULES];
        for row in &self.rows {
            for (c, o) in counts.iter_mut().zip(row) {
                *c += o.decisive_left() as usize;
            }
        }
        counts
    }

    /// A menu is two-sided when some active rule recommends each side.
    pub fn is_two_sided(&self, menu: usize) -> bool {
        self.two_sided_within(menu, &RuleId::ALL)
    }

    pub fn two_sided_within(&self, menu: usize, library: &[RuleId]) -> bool {
        let row = &self.rows[menu];
        let left = library.iter().any(|r| row[r.index()].decisive_left());
        let right = library.iter().any(|r| row[r.index()].decisive_right());
        left && right
    }

    pub fn subset(&self, rows: &[usize]) -> RuleMatrix {
        RuleMatrix {
            menu_ids: rows.iter().map(|&i| self.menu_ids[i].clone()).collect(),
            rows: rows.iter().map(|&i| self.rows[i]).collect(),
            activity: self.activity,
            big_m: self.big_m,
        }
    }

    /// CSV with `menu_id` then `<rule>_active`, `<rule>_left` as 0/1 per rule.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["menu_id".to_string()];
        for r in RuleId::ALL {
            header.push(format!("{r}_active"));
            header.push(format!("{r}_left"));
        }
        w.write_record(&header)?;
        for (id, row) in self.menu_ids.iter().zip(&self.rows) {
            let mut rec = vec![id.clone()];
            for o in row {
                rec.push((o.active as u8).to_string());
                rec.push((o.left as u8).to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`RuleMatrix::write_csv`].
    pub fn read_csv<R: std::io::Read>(input: R, activity: Activity, big_m: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.len() != 1 + 2 * N_RULES || &headers[0] != "menu_id" {
            return Err(Error::SchemaViolation(
                "rule matrix CSV needs menu_id plus 24 indicator columns".into(),
            ));
        }
        for (k, r) in RuleId::ALL.iter().enumerate() {
            if headers[1 + 2 * k] != format!("{r}_active") || headers[2 + 2 * k] != format!("{r}_left") {
                return Err(Error::SchemaViolation(format!("unexpected columns for {r}")));
            }
        }
        let mut menu_ids = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bit = |s: &str| -> Result<bool> {
                match s {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::ParseError {
                        row: i + 1,
                        message: format!("indicator must be 0 or 1, got {other:?}"),
                    }),
                }
            };
            menu_ids.push(rec[0].to_string());
            let mut row = [RuleOutcome::INACTIVE; N_RULES];
            for (k, o) in row.iter_mut().enumerate() {
                o.active = bit(&rec[1 + 2 * k])?;
                o.left = bit(&rec[2 + 2 * k])?;
            }
            rows.push(row);
        }
        Ok(RuleMatrix {
            menu_ids,
            rows,
            activity,
            big_m,
        })
    }
}

/// Menu complexity used for placebo strata: total support size of both lotteries.
pub fn menu_complexity(menu: &Menu) -> f64 {
    (menu.left.support_size() + menu.right.support_size()) as f64
}

/// Scramble each non-attention rule's (active, left) pairs across menus within
/// complexity strata, preserving per-stratum activity and left rates.
pub fn placebo_permute(matrix: &RuleMatrix, menus: &[Menu], strata: usize, seed: u64) -> Result<RuleMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    permute_within_strata(matrix, menus, strata, |members| {
        let mut p = members.to_vec();
        p.shuffle(&mut rng);
        p
    })
}

pub(crate) fn permute_within_strata(
    matrix: &RuleMatrix,
    menus: &[Menu],
    strata: usize,
    mut permutation: impl FnMut(&[usize]) -> Vec<usize>,
) -> Result<RuleMatrix> {
    if menus.len() != matrix.len() {
        return Err(Error::LengthMismatch(format!(
            "{} menus vs {} matrix rows",
            menus.len(),
            matrix.len()
        )));
    }
    if strata == 0 {
        return Err(Error::InvalidArgument("strata must be at least 1".into()));
    }
    let stratum_of: Vec<usize> = if strata == 1 {
        vec![0; menus.len()]
    } else {
        let complexity: Vec<f64> = menus.iter().map(menu_complexity).collect();
        decile_bins(&complexity, strata)?.bins
    };
    let n_strata = stratum_of.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_strata];
    for (i, &s) in stratum_of.iter().enumerate() {
        members[s].push(i);
    }
    if let Some((s, m)) = members.iter().enumerate().find(|(_, m)| m.len() < 2) {
        return Err(Error::StrataTooFine {
            stratum: s,
            size: m.len(),
        });
    }

    let mut out = matrix.clone();
    for rule in RuleId::ALL.iter().filter(|r| !r.is_attention()) {
        for group in &members {
            let source = permutation(group);
            for (&dst, &src) in group.iter().zip(&source) {
                out.rows[dst][rule.index()] = matrix.rows[src][rule.index()];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn menu(l: Lottery, r: Lottery) -> Menu {
        Menu::unlabeled("m", l, r)
    }

    fn lot(xs: &[f64], ps: &[f64]) -> Lottery {
        Lottery::new(xs, ps).unwrap()
    }

    const STRICT: Activity = Activity::Fsd { epsilon: 0.0 };

    #[test]
    fn mmn_prefers_better_worst_case() {
        let m = menu(lot(&[0.0, 10.0], &[0.5, 0.5]), Lottery::degenerate(1.0));
        let o = evaluate_rule(RuleId::MMn, &m, STRICT, 101.0);
        assert_eq!(
            o,
            RuleOutcome {
                active: true,
                left: false
            }
        );
    }

    #[test]
    fn attention_rules_are_constant() {
        let m = menu(lot(&[-5.0, 10.0], &[0.5, 0.5]), lot(&[2.0, 3.0], &[0.2, 0.8]));
        let big_m = big_m_for(std::slice::from_ref(&m));
        assert_eq!(big_m, 101.0);
        assert!(evaluate_rule(RuleId::A1, &m, STRICT, big_m).decisive_left());
        assert!(evaluate_rule(RuleId::A2, &m, STRICT, big_m).decisive_right());
    }

    #[test]
    fn map_uses_upper_mode() {
        let m = menu(lot(&[1.0, 2.0], &[0.5, 0.5]), Lottery::degenerate(1.5));
        assert!(evaluate_rule(RuleId::MAP, &m, STRICT, 21.0).decisive_left());
    }

    #[test]
    fn dis_on_sure_outcomes_is_inactive() {
        let m = menu(Lottery::degenerate(3.0), Lottery::degenerate(1.0));
        assert!(!evaluate_rule(RuleId::DIS, &m, STRICT, 31.0).active);
        assert!(!evaluate_rule(RuleId::DISmed, &m, STRICT, 31.0).active);
    }

    #[test]
    fn sure_gain_versus_zero_activates_every_simplification_rule() {
        let menus = vec![menu(Lottery::degenerate(1.0), Lottery::degenerate(0.0))];
        let rm = build_rule_matrix(&menus, STRICT);
        for r in [
            RuleId::MMn,
            RuleId::MMa,
            RuleId::MMx,
            RuleId::MAP,
            RuleId::SAL,
            RuleId::REG,
            RuleId::REGmed,
        ] {
            assert!(rm.get(0, r).decisive_left(), "{r}");
        }
        // Only one distinct pairing: the top two salience scores tie.
        assert!(!rm.get(0, RuleId::SAL2).active);
    }

    #[test]
    fn sal2_uses_second_pairing() {
        // Pairings: (0,4) c=0.8, (0,5) c=5/6, (10,4) c=6/15, (10,5) c=5/16.
        let m = menu(lot(&[0.0, 10.0], &[0.5, 0.5]), lot(&[4.0, 5.0], &[0.5, 0.5]));
        let sal = evaluate_rule(RuleId::SAL, &m, STRICT, 101.0);
        let sal2 = evaluate_rule(RuleId::SAL2, &m, STRICT, 101.0);
        assert!(sal.decisive_right());
        assert!(sal2.decisive_right());
    }

    #[test]
    fn dismed_falls_back_to_dis_with_single_downside_outcome() {
        let l = lot(&[0.0, 10.0], &[0.3, 0.7]);
        assert_eq!(disappointment_second(&l), disappointment_max(&l));
        let l3 = lot(&[0.0, 5.0, 10.0], &[0.2, 0.2, 0.6]);
        assert!(disappointment_second(&l3) < disappointment_max(&l3));
    }

    #[test]
    fn all_active_mode_activates_everything() {
        let m = menu(lot(&[0.0, 2.0], &[0.5, 0.5]), Lottery::degenerate(1.0));
        for r in RuleId::ALL {
            assert!(evaluate_rule(r, &m, Activity::AllActive, 21.0).active);
        }
    }

    #[test]
    fn placebo_identity_permutation_is_noop_and_counts_are_preserved() {
        let menus: Vec<Menu> = (0..8)
            .map(|i| {
                menu(
                    lot(&[0.0, i as f64 + 1.0], &[0.5, 0.5]),
                    Lottery::degenerate(i as f64 * 0.3),
                )
            })
            .collect();
        let rm = build_rule_matrix(&menus, STRICT);
        let same = permute_within_strata(&rm, &menus, 1, |m| m.to_vec()).unwrap();
        assert_eq!(same, rm);

        let shuffled = placebo_permute(&rm, &menus, 1, 7).unwrap();
        assert_eq!(shuffled.activity_counts(), rm.activity_counts());
        assert_eq!(shuffled.left_counts(), rm.left_counts());
    }

    #[test]
    fn placebo_rejects_tiny_strata() {
        let menus: Vec<Menu> = (0..3)
            .map(|i| menu(Lottery::degenerate(i as f64), Lottery::degenerate(0.5)))
            .collect();
        let rm = build_rule_matrix(&menus, STRICT);
        assert!(matches!(
            permute_within_strata(&rm, &menus[..1], 1, |m| m.to_vec()),
            Err(Error::LengthMismatch(_))
        ));
        let one = build_rule_matrix(&menus[..1], STRICT);
        assert!(matches!(
            placebo_permute(&one, &menus[..1], 1, 0),
            Err(Error::StrataTooFine { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let menus = vec![
            menu(lot(&[0.0, 10.0], &[0.5, 0.5]), Lottery::degenerate(1.0)),
            menu(Lottery::degenerate(2.0), Lottery::degenerate(1.0)),
        ];
        let rm = build_rule_matrix(&menus, STRICT);
        let mut buf = Vec::new();
        rm.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("menu_id,MMn_active,MMn_left,MMa_active"));
        let back = RuleMatrix::read_csv(buf.as_slice(), rm.activity, rm.big_m).unwrap();
        assert_eq!(back, rm);
    }
}
