//! Synthetic menus and choice rates drawn from a known gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::features::{Encoding, FeatureSet, GATE_FEATURE_NAMES, N_GATE_FEATURES};
use crate::gate::{predict, GateParams};
use crate::identification::{cell_rank, restriction_from_rate, DEFAULT_TRIM};
use crate::lottery::{canonicalize, Lottery, Menu};
use crate::rules::{build_rule_matrix, Activity, RuleMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FeatureMode {
    /// Every menu in a cell is assigned the cell's feature vector. Only the
    /// first `varying` coordinates differ across cells.
    Oracle { varying: usize },
    /// Features computed from the lotteries themselves.
    Computed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cells: usize,
    pub menus_per_cell: usize,
    /// `None` sets each choice rate to the model probability exactly.
    pub n_trials: Option<u32>,
    pub max_support: usize,
    pub payoff_min: i32,
    pub payoff_max: i32,
    pub feature_mode: FeatureMode,
    pub activity: Activity,
    /// Per-rule coefficients `c_f` on `z₀²` added to the true index, in
    /// library order. Empty keeps the gate affine.
    pub curvature: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cells: 13,
            menus_per_cell: 20,
            n_trials: None,
            max_support: 4,
            payoff_min: -20,
            payoff_max: 50,
            feature_mode: FeatureMode::Oracle {
                varying: N_GATE_FEATURES,
            },
            activity: Activity::default(),
            curvature: Vec::new(),
            seed: 0,
        }
    }
}

/// Lottery with 1..=`max_support` distinct integer payoffs and uniform-simplex probabilities.
pub fn random_lottery<R: Rng>(rng: &mut R, max_support: usize, lo: i32, hi: i32) -> Lottery {
    let span = (hi - lo + 1).max(1) as usize;
    let k = rng.random_range(1..=max_support.max(1)).min(span);
    let xs: Vec<f64> = rand::seq::index::sample(rng, span, k)
        .into_iter()
        .map(|i| (lo + i as i32) as f64)
        .collect();
    let ws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = ws.iter().sum();
    let ps: Vec<f64> = ws.iter().map(|w| w / total).collect();
    canonicalize(&xs, &ps).expect("sampled lottery is valid")
}

/// Synthetic corpus together with what generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub features: FeatureSet,
    pub matrix: RuleMatrix,
    pub true_probs: Vec<f64>,
    pub cell_of: Vec<usize>,
    pub params: GateParams,
}

fn draw_rates(probs: &[f64], n_trials: Option<u32>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match n_trials {
        None => probs.to_vec(),
        Some(n) => probs
            .iter()
            .map(|&p| {
                let b = Binomial::new(n as u64, p.clamp(0.0, 1.0)).expect("valid binomial");
                b.sample(rng) as f64 / n as f64
            })
            .collect(),
    }
}

pub fn generate_synthetic(params: &GateParams, config: &SynthConfig) -> Result<Synthetic> {
    params.validate()?;
    if config.n_cells == 0 || config.menus_per_cell == 0 {
        return Err(Error::InvalidArgument("need at least one cell and one menu".into()));
    }
    if config.payoff_min > config.payoff_max {
        return Err(Error::InvalidArgument("payoff range is empty".into()));
    }
    if config.n_trials == Some(0) {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    if params.n_features() != N_GATE_FEATURES {
        return Err(Error::DimensionMismatch {
            expected: N_GATE_FEATURES,
            got: params.n_features(),
        });
    }
    if !config.curvature.is_empty() && config.curvature.len() != params.rules.len() {
        return Err(Error::DimensionMismatch {
            expected: params.rules.len(),
            got: config.curvature.len(),
        });
    }
    let true_prob = |z: &[f64], row: &[crate::rules::RuleOutcome; crate::rules::N_RULES]| -> f64 {
        if config.curvature.is_empty() {
            return predict(params, z, row).g;
        }
        let mut bent = params.clone();
        for (a, c) in bent.alpha.iter_mut().zip(&config.curvature) {
            *a += c * z[0] * z[0];
        }
        predict(&bent, z, row).g
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let library = &params.rules;
    let needed = library.len().saturating_sub(1);

    let draw_menus = |rng: &mut ChaCha8Rng, cell: usize| -> Vec<Menu> {
        (0..config.menus_per_cell)
            .map(|j| {
                Menu::unlabeled(
                    format!("c{cell}_m{j}"),
                    random_lottery(rng, config.max_support, config.payoff_min, config.payoff_max),
                    random_lottery(rng, config.max_support, config.payoff_min, config.payoff_max),
                )
            })
            .collect()
    };

    let mut menus = Vec::with_capacity(config.n_cells * config.menus_per_cell);
    let mut cell_of = Vec::with_capacity(menus.capacity());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    match config.feature_mode {
        FeatureMode::Oracle { varying } => {
            let varying = varying.min(N_GATE_FEATURES);
            let base: Vec<f64> = (0..N_GATE_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
            for cell in 0..config.n_cells {
                let mut z = base.clone();
                for v in z.iter_mut().take(varying) {
                    *v = rng.random_range(-1.0..1.0);
                }
                // Redraw the cell until its restriction rows reach |F| - 1.
                let mut achieved = 0;
                let mut accepted = None;
                for _ in 0..20 {
                    let cand = draw_menus(&mut rng, cell);
                    let rm = build_rule_matrix(&cand, config.activity);
                    let mut h = Vec::new();
                    let mut n_rows = 0;
                    for row in &rm.rows {
                        let p = true_prob(&z, row);
                        let r = restriction_from_rate(p, row, library, DEFAULT_TRIM);
                        if r.iter().any(|&v| v > 0.0) && r.iter().any(|&v| v < 0.0) {
                            h.extend(r);
                            n_rows += 1;
                        }
                    }
                    let h = nalgebra::DMatrix::from_row_slice(n_rows, library.len(), &h);
                    achieved = if n_rows == 0 { 0 } else { cell_rank(&h).rank };
                    if achieved >= needed {
                        accepted = Some(cand);
                        break;
                    }
                }
                let Some(cand) = accepted else {
                    return Err(Error::InfeasibleCell { cell, achieved, needed });
                };
                for m in cand {
                    menus.push(m);
                    cell_of.push(cell);
                    rows.push(z.clone());
                }
            }
        }
        FeatureMode::Computed => {
            for cell in 0..config.n_cells {
                for m in draw_menus(&mut rng, cell) {
                    menus.push(m);
                    cell_of.push(cell);
                }
            }
        }
    }

    let mut dataset = Dataset::new(
        "synthetic",
        menus,
        Provenance {
            source: "synthetic".into(),
            schema: "canonical".into(),
            rows_read: 0,
            filters: Vec::new(),
        },
    )?;
    let features = match config.feature_mode {
        FeatureMode::Oracle { .. } => FeatureSet::from_rows(names, &rows, dataset.rescale_factor)?,
        FeatureMode::Computed => FeatureSet::compute(&dataset.menus, dataset.rescale_factor, Encoding::Gate),
    };
    let matrix = build_rule_matrix(&dataset.menus, config.activity);
    let true_probs: Vec<f64> = (0..matrix.len())
        .map(|i| true_prob(features.row(i), &matrix.rows[i]))
        .collect();
    let rates = draw_rates(&true_probs, config.n_trials, &mut rng);
    for (m, p) in dataset.menus.iter_mut().zip(&rates) {
        m.choice_rate = Some(*p);
        m.n_trials = config.n_trials;
    }
    let mut params = params.clone();
    params.rescale_factor = features.rescale_factor;
    Ok(Synthetic {
        dataset,
        features,
        matrix,
        true_probs,
        cell_of,
        params,
    })
}

impl Synthetic {
    /// Same menus, fresh binomial choice rates.
    pub fn redraw(&self, n_trials: Option<u32>, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rates = draw_rates(&self.true_probs, n_trials, &mut rng);
        let mut ds = self.dataset.clone();
        for (m, p) in ds.menus.iter_mut().zip(rates) {
            m.choice_rate = Some(p);
            m.n_trials = n_trials;
        }
        ds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::random_params;
    use crate::rules::RuleId;

    #[test]
    fn oracle_cells_share_features_and_are_two_sided() {
        let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let truth = random_params(&mut rng, &RuleId::ALL, &names, 0.3);
        let s = generate_synthetic(&truth, &SynthConfig::default()).unwrap();
        assert_eq!(s.dataset.len(), 13 * 20);
        for i in 0..s.dataset.len() {
            let first = s.cell_of.iter().position(|&c| c == s.cell_of[i]).unwrap();
            assert_eq!(s.features.row(i), s.features.row(first));
            assert!(s.matrix.is_two_sided(i));
            assert_eq!(s.dataset.menus[i].choice_rate, Some(s.true_probs[i]));
        }
        let again = generate_synthetic(&truth, &SynthConfig::default()).unwrap();
        assert_eq!(again.dataset, s.dataset);
    }

    #[test]
    fn binomial_rates_are_multiples_of_one_over_n() {
        let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        let truth = GateParams::zeros(&RuleId::ALL, &names, 1.0);
        let cfg = SynthConfig {
            n_trials: Some(40),
            feature_mode: FeatureMode::Computed,
            ..Default::default()
        };
        let s = generate_synthetic(&truth, &cfg).unwrap();
        for m in &s.dataset.menus {
            let k = m.choice_rate.unwrap() * 40.0;
            assert!((k - k.round()).abs() < 1e-9);
        }
    }
}
