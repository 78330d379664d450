//! Finite-support lotteries and the numeric primitives shared by the rule library.
//!
//! A [`Lottery`] is always held in canonical form: outcomes strictly increasing,
//! probabilities strictly positive and summing to one. Every constructor goes
//! through [`canonicalize`], so downstream code can align supports on a merged
//! grid without re-sorting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on survival values in dominance comparisons.
pub const SURVIVAL_TOL: f64 = 1e-12;

/// Accepted deviation of raw probability sums from one before renormalization.
pub const SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLottery", into = "RawLottery")]
pub struct Lottery {
    outcomes: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawLottery {
    outcomes: Vec<f64>,
    probs: Vec<f64>,
}

impl TryFrom<RawLottery> for Lottery {
    type Error = Error;
    fn try_from(raw: RawLottery) -> Result<Self> {
        canonicalize(&raw.outcomes, &raw.probs)
    }
}

impl From<Lottery> for RawLottery {
    fn from(l: Lottery) -> Self {
        RawLottery {
            outcomes: l.outcomes,
            probs: l.probs,
        }
    }
}

/// Merge equal payoffs, drop zero-probability outcomes, sort, and renormalize.
pub fn canonicalize(outcomes: &[f64], probs: &[f64]) -> Result<Lottery> {
    if outcomes.len() != probs.len() {
        return Err(Error::LengthMismatch(format!(
            "{} outcomes vs {} probabilities",
            outcomes.len(),
            probs.len()
        )));
    }
    if outcomes.is_empty() {
        return Err(Error::EmptySupport);
    }
    if outcomes.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("outcomes"));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("probabilities"));
    }
    if let Some(&p) = probs.iter().find(|&&p| p < 0.0) {
        return Err(Error::NegativeProbability(p));
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    if (total - 1.0).abs() > SUM_TOL {
        return Err(Error::ProbabilityNotNormalized(total));
    }

    let mut pairs: Vec<(f64, f64)> = outcomes
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&x, &p)| (x, p))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut xs: Vec<f64> = Vec::with_capacity(pairs.len());
    let mut ps: Vec<f64> = Vec::with_capacity(pairs.len());
    for (x, p) in pairs {
        match xs.last() {
            Some(&last) if last == x => *ps.last_mut().unwrap() += p,
            _ => {
                xs.push(x);
                ps.push(p);
            }
        }
    }

    // Only renormalize when the sum is off by more than accumulated rounding,
    // which keeps canonicalization exactly idempotent.
    let sum: f64 = ps.iter().sum();
    if (sum - 1.0).abs() > ps.len() as f64 * f64::EPSILON {
        for p in &mut ps {
            *p /= sum;
        }
    }
    Ok(Lottery {
        outcomes: xs,
        probs: ps,
    })
}

impl Lottery {
    pub fn new(outcomes: &[f64], probs: &[f64]) -> Result<Self> {
        canonicalize(outcomes, probs)
    }

    /// The sure outcome `x`.
    pub fn degenerate(x: f64) -> Self {
        Lottery {
            outcomes: vec![x],
            probs: vec![1.0],
        }
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support_size(&self) -> usize {
        self.outcomes.len()
    }

    pub fn min(&self) -> f64 {
        self.outcomes[0]
    }

    pub fn max(&self) -> f64 {
        *self.outcomes.last().unwrap()
    }

    pub fn expected_value(&self) -> f64 {
        self.outcomes.iter().zip(&self.probs).map(|(x, p)| x * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.expected_value();
        self.outcomes
            .iter()
            .zip(&self.probs)
            .map(|(x, p)| p * (x - mu).powi(2))
            .sum()
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standardized third central moment; zero for a sure outcome.
    pub fn skewness(&self) -> f64 {
        let var = self.variance();
        if var <= 0.0 {
            return 0.0;
        }
        let mu = self.expected_value();
        let m3: f64 = self
            .outcomes
            .iter()
            .zip(&self.probs)
            .map(|(x, p)| p * (x - mu).powi(3))
            .sum();
        m3 / var.powf(1.5)
    }

    pub fn max_abs(&self) -> f64 {
        self.min().abs().max(self.max().abs())
    }

    /// Same lottery with every outcome multiplied by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> Lottery {
        Lottery {
            outcomes: self.outcomes.iter().map(|x| x * factor).collect(),
            probs: self.probs.clone(),
        }
    }
}

/// A binary menu: left and right lotteries with an optional observed left-choice rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Menu {
    pub id: String,
    pub left: Lottery,
    pub right: Lottery,
    pub choice_rate: Option<f64>,
    pub n_trials: Option<u32>,
}

impl Menu {
    pub fn new(
        id: impl Into<String>,
        left: Lottery,
        right: Lottery,
        choice_rate: Option<f64>,
        n_trials: Option<u32>,
    ) -> Result<Self> {
        if let Some(p) = choice_rate {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("choice rate {p} outside [0, 1]")));
            }
        }
        if n_trials == Some(0) {
            return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
        }
        Ok(Menu {
            id: id.into(),
            left,
            right,
            choice_rate,
            n_trials,
        })
    }

    /// Menu without an observed choice rate.
    pub fn unlabeled(id: impl Into<String>, left: Lottery, right: Lottery) -> Self {
        Menu {
            id: id.into(),
            left,
            right,
            choice_rate: None,
            n_trials: None,
        }
    }

    pub fn max_abs_payoff(&self) -> f64 {
        self.left.max_abs().max(self.right.max_abs())
    }

    pub fn swapped(&self) -> Menu {
        Menu {
            id: self.id.clone(),
            left: self.right.clone(),
            right: self.left.clone(),
            choice_rate: self.choice_rate.map(|p| 1.0 - p),
            n_trials: self.n_trials,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dominance {
    LeftStrict,
    RightStrict,
    Equivalent,
    Incomparable,
}

impl Dominance {
    pub fn is_strict(self) -> bool {
        matches!(self, Dominance::LeftStrict | Dominance::RightStrict)
    }
}

/// Survival values of `a` and `b` on the ordered union of their supports.
fn survival_on_union(a: &Lottery, b: &Lottery) -> (Vec<f64>, Vec<f64>) {
    let (xa, pa) = (a.outcomes(), a.probs());
    let (xb, pb) = (b.outcomes(), b.probs());
    let mut mass_a = Vec::with_capacity(xa.len() + xb.len());
    let mut mass_b = Vec::with_capacity(xa.len() + xb.len());
    let (mut i, mut j) = (0, 0);
    while i < xa.len() || j < xb.len() {
        let take_a = j >= xb.len() || (i < xa.len() && xa[i] <= xb[j]);
        let take_b = i >= xa.len() || (j < xb.len() && xb[j] <= xa[i]);
        mass_a.push(if take_a { pa[i] } else { 0.0 });
        mass_b.push(if take_b { pb[j] } else { 0.0 });
        if take_a {
            i += 1;
        }
        if take_b {
            j += 1;
        }
    }
    let tail = |mass: &[f64]| {
        let mut s = vec![0.0; mass.len()];
        let mut acc = 0.0;
        for k in (0..mass.len()).rev() {
            acc += mass[k];
            s[k] = acc;
        }
        s
    };
    (tail(&mass_a), tail(&mass_b))
}

/// First-order stochastic dominance with an optional gap `epsilon >= 0`.
///
/// `a` strictly dominates when its survival function exceeds that of `b` by at
/// least `epsilon` at every grid point above the lowest one, and by more than
/// [`SURVIVAL_TOL`] somewhere. Both survival functions equal one at the lowest
/// grid point, so that point carries no information and is skipped.
pub fn fsd_compare(a: &Lottery, b: &Lottery, epsilon: f64) -> Dominance {
    let (sa, sb) = survival_on_union(a, b);
    let mut a_ge = true;
    let mut b_ge = true;
    let mut a_strict = false;
    let mut b_strict = false;
    let mut equal = true;
    for k in 1..sa.len() {
        let diff = sa[k] - sb[k];
        if diff < epsilon - SURVIVAL_TOL {
            a_ge = false;
        }
        if -diff < epsilon - SURVIVAL_TOL {
            b_ge = false;
        }
        if diff > SURVIVAL_TOL {
            a_strict = true;
        }
        if -diff > SURVIVAL_TOL {
            b_strict = true;
        }
        if diff.abs() > SURVIVAL_TOL {
            equal = false;
        }
    }
    if a_ge && a_strict {
        Dominance::LeftStrict
    } else if b_ge && b_strict {
        Dominance::RightStrict
    } else if equal {
        Dominance::Equivalent
    } else {
        Dominance::Incomparable
    }
}

/// Normalized contrast `|x - y| / (|x| + |y| + 1)` on raw payoffs.
pub fn contrast(x: f64, y: f64) -> f64 {
    (x - y).abs() / (x.abs() + y.abs() + 1.0)
}

/// Joint state space of two independent lotteries: `(payoff_a, payoff_b, prob)`.
pub fn product_state_space(a: &Lottery, b: &Lottery) -> Vec<(f64, f64, f64)> {
    let mut states = Vec::with_capacity(a.support_size() * b.support_size());
    for (&x, &p) in a.outcomes().iter().zip(a.probs()) {
        for (&y, &q) in b.outcomes().iter().zip(b.probs()) {
            states.push((x, y, p * q));
        }
    }
    states
}

/// Lower weighted median: the smallest value whose cumulative weight reaches half the total.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() || values.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} values vs {} weights",
            values.len(),
            weights.len()
        )));
    }
    if let Some(&w) = weights.iter().find(|&&w| w < 0.0) {
        return Err(Error::NegativeProbability(w));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let half = 0.5 * total;
    let mut cum = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        cum += weights[i];
        // Equal values are a single atom: consume the whole run before testing.
        let last_of_run = pos + 1 == order.len() || values[order[pos + 1]] != values[i];
        if last_of_run && cum >= half - SURVIVAL_TOL * total {
            return Ok(values[i]);
        }
    }
    Ok(values[*order.last().unwrap()])
}

/// Modal payoff, ties broken toward the larger payoff.
pub fn mode(a: &Lottery) -> f64 {
    let pmax = a.probs().iter().cloned().fold(f64::MIN, f64::max);
    a.outcomes()
        .iter()
        .zip(a.probs())
        .rev()
        .find(|(_, &p)| p >= pmax - SURVIVAL_TOL)
        .map(|(&x, _)| x)
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lot(xs: &[f64], ps: &[f64]) -> Lottery {
        Lottery::new(xs, ps).unwrap()
    }

    #[test]
    fn canonicalize_merges_sorts_and_keeps_identity() {
        let l = canonicalize(&[1.0, 1.0, 2.0], &[0.25, 0.25, 0.5]).unwrap();
        assert_eq!(l.outcomes(), &[1.0, 2.0]);
        assert_eq!(l.probs(), &[0.5, 0.5]);

        let l = canonicalize(&[5.0], &[1.0]).unwrap();
        assert_eq!(l, Lottery::degenerate(5.0));

        let l = canonicalize(&[3.0, 1.0], &[0.4, 0.6]).unwrap();
        assert_eq!(l.outcomes(), &[1.0, 3.0]);
        assert_eq!(l.probs(), &[0.6, 0.4]);
    }

    #[test]
    fn canonicalize_rejects_bad_input() {
        assert!(matches!(
            canonicalize(&[1.0, 2.0], &[1.0]),
            Err(Error::LengthMismatch(_))
        ));
        assert!(matches!(
            canonicalize(&[1.0, 2.0], &[1.5, -0.5]),
            Err(Error::NegativeProbability(_))
        ));
        assert!(matches!(canonicalize(&[1.0, 2.0], &[0.0, 0.0]), Err(Error::ZeroMass)));
        assert!(matches!(
            canonicalize(&[1.0], &[0.9]),
            Err(Error::ProbabilityNotNormalized(_))
        ));
    }

    #[test]
    fn canonicalize_drops_zero_mass_and_renormalizes() {
        let l = canonicalize(&[0.0, 1.0, 2.0], &[0.3, 0.0, 0.7000004]).unwrap();
        assert_eq!(l.outcomes(), &[0.0, 2.0]);
        assert!((l.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fsd_examples() {
        let d1 = Lottery::degenerate(1.0);
        let d0 = Lottery::degenerate(0.0);
        assert_eq!(fsd_compare(&d1, &d0, 0.0), Dominance::LeftStrict);
        assert_eq!(fsd_compare(&d0, &d1, 0.0), Dominance::RightStrict);

        let spread = lot(&[0.0, 2.0], &[0.5, 0.5]);
        assert_eq!(fsd_compare(&spread, &d1, 0.0), Dominance::Incomparable);

        let low = lot(&[0.0, 1.0], &[0.5, 0.5]);
        assert_eq!(fsd_compare(&spread, &low, 0.0), Dominance::LeftStrict);

        assert_eq!(fsd_compare(&spread, &spread, 0.0), Dominance::Equivalent);
        assert_eq!(fsd_compare(&d1, &d1, 0.3), Dominance::Equivalent);
    }

    #[test]
    fn fsd_epsilon_gap() {
        // Survival gap at the top point is only 0.05.
        let a = lot(&[0.0, 10.0], &[0.45, 0.55]);
        let b = lot(&[0.0, 10.0], &[0.5, 0.5]);
        assert_eq!(fsd_compare(&a, &b, 0.0), Dominance::LeftStrict);
        assert_eq!(fsd_compare(&a, &b, 0.05), Dominance::LeftStrict);
        assert_eq!(fsd_compare(&a, &b, 0.06), Dominance::Incomparable);
    }

    #[test]
    fn contrast_examples() {
        assert!((contrast(3.0, 1.0) - 0.4).abs() < 1e-15);
        assert_eq!(contrast(7.5, 7.5), 0.0);
        assert_eq!(contrast(0.0, 0.0), 0.0);
    }

    #[test]
    fn product_state_space_examples() {
        let s = product_state_space(&Lottery::degenerate(1.0), &Lottery::degenerate(2.0));
        assert_eq!(s, vec![(1.0, 2.0, 1.0)]);

        let a = lot(&[0.0, 1.0], &[0.3, 0.7]);
        let b = lot(&[2.0, 3.0], &[0.5, 0.5]);
        let probs: Vec<f64> = product_state_space(&a, &b).iter().map(|t| t.2).collect();
        let expect = [0.15, 0.15, 0.35, 0.35];
        for (p, e) in probs.iter().zip(expect) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_median_examples() {
        assert_eq!(weighted_median(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(weighted_median(&[0.0, 10.0], &[0.9, 0.1]).unwrap(), 0.0);
        assert_eq!(weighted_median(&[1.0, 2.0], &[0.5, 0.5]).unwrap(), 1.0);
        assert_eq!(weighted_median(&[2.0, 1.0], &[0.5, 0.5]).unwrap(), 1.0);
        // Repeated values pool their weight.
        assert_eq!(weighted_median(&[0.0, 0.0, 5.0], &[0.3, 0.3, 0.4]).unwrap(), 0.0);
        assert!(matches!(weighted_median(&[1.0], &[0.0]), Err(Error::ZeroMass)));
        assert!(matches!(
            weighted_median(&[1.0, 2.0], &[1.0]),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn mode_breaks_ties_upward() {
        assert_eq!(mode(&lot(&[0.0, 5.0], &[0.3, 0.7])), 5.0);
        assert_eq!(mode(&lot(&[1.0, 2.0], &[0.5, 0.5])), 2.0);
        assert_eq!(mode(&Lottery::degenerate(-3.0)), -3.0);
    }

    #[test]
    fn moments_of_degenerate_lottery() {
        let d = Lottery::degenerate(4.0);
        assert_eq!(d.variance(), 0.0);
        assert_eq!(d.skewness(), 0.0);
        assert_eq!(d.expected_value(), 4.0);
    }
}
