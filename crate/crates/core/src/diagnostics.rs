//! Summaries of a fitted gate: concentration, ablation, comparative statics,
//! completeness, permutation restrictiveness and cross-fitted library
//! restriction.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::{mse, run_cv, Learner, Problem, RuleGating, RunRecord, SplitPlan};
use crate::error::{Error, Result};
use crate::features::{decile_bins, menu_covariates, FeatureSet};
use crate::gate::{predict_all, responsibilities, GateParams};
use crate::linalg::{mean, sample_sd};
use crate::lottery::Menu;
use crate::rules::{Family, RuleId, RuleMatrix, N_RULES};

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub hhi: f64,
    pub n_eff: f64,
    pub w: Vec<f64>,
}

/// Herfindahl index of responsibility weights and the effective number of rules.
pub fn concentration(w: &[f64]) -> Result<ConcentrationReport> {
    if w.is_empty() || w.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) {
        return Err(Error::NotSimplex(w.iter().sum()));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotSimplex(total));
    }
    let hhi: f64 = w.iter().map(|v| v * v).sum();
    Ok(ConcentrationReport {
        hhi,
        n_eff: 1.0 / hhi,
        w: w.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub rule: RuleId,
    /// Relative increase in mean test MSE after removing the rule.
    pub phi: f64,
    pub delta_mse: f64,
    pub delta_mse_se: f64,
    /// Relative change in the effective number of rules.
    pub sigma_n: f64,
    pub n_eff: f64,
    pub per_fold_delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub full_mse: f64,
    pub full_n_eff: f64,
    pub entries: Vec<AblationEntry>,
    pub full: RunRecord,
}

/// Mean effective number of rules over the per-split models, each scored on
/// every menu.
fn mean_n_eff(models: &[GateParams], features: &FeatureSet, matrix: &RuleMatrix) -> Result<f64> {
    let v: Vec<f64> = models
        .iter()
        .map(|p| concentration(&responsibilities(p, features, matrix).w).map(|c| c.n_eff))
        .collect::<Result<_>>()?;
    Ok(mean(&v))
}

/// Refit without each listed rule and compare to the full library split by
/// split. Attention rules cannot be dropped.
pub fn ablate(
    problem: &Problem<'_>,
    base: &RuleGating,
    drop: &[RuleId],
    plan: &SplitPlan,
    lr_grid: &[f64],
) -> Result<AblationReport> {
    if let Some(r) = drop.iter().find(|r| r.is_attention()) {
        return Err(Error::InvalidArgument(format!(
            "{r} is an attention rule and is not ablated"
        )));
    }
    let full = run_cv(problem, base, plan, lr_grid)?;
    let full_test = full.record.test_mse();
    let full_mse = mean(&full_test);
    let full_n_eff = mean_n_eff(&full.models, problem.features, problem.matrix)?;
    let entries = drop
        .iter()
        .map(|&rule| {
            let reduced = RuleGating {
                rules: base.rules.iter().copied().filter(|&r| r != rule).collect(),
                train: base.train.clone(),
            };
            let run = run_cv(problem, &reduced, plan, lr_grid)?;
            let per_fold_delta: Vec<f64> = run
                .record
                .test_mse()
                .iter()
                .zip(&full_test)
                .map(|(a, b)| a - b)
                .collect();
            let delta_mse = mean(&per_fold_delta);
            let n_eff = mean_n_eff(&run.models, problem.features, problem.matrix)?;
            Ok(AblationEntry {
                rule,
                phi: delta_mse / full_mse,
                delta_mse,
                delta_mse_se: sample_sd(&per_fold_delta) / (per_fold_delta.len() as f64).sqrt(),
                sigma_n: (n_eff - full_n_eff) / full_n_eff,
                n_eff,
                per_fold_delta,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        full_mse,
        full_n_eff,
        entries,
        full: full.record,
    })
}

impl AblationReport {
    /// rule, phi, delta_mse, delta_mse_se, sigma_n, n_eff
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rule", "phi", "delta_mse", "delta_mse_se", "sigma_n", "n_eff"])?;
        for e in &self.entries {
            w.write_record([
                e.rule.to_string(),
                e.phi.to_string(),
                e.delta_mse.to_string(),
                e.delta_mse_se.to_string(),
                e.sigma_n.to_string(),
                e.n_eff.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Covariate {
    /// Tradeoff complexity.
    Tc,
    RiskAsym,
}

impl std::str::FromStr for Covariate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "tc" => Ok(Covariate::Tc),
            "risk_asym" | "riskasym" => Ok(Covariate::RiskAsym),
            other => Err(Error::InvalidArgument(format!("unknown covariate {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    /// Conditional on activity.
    Effective,
    /// Gate output before conditioning.
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticsRow {
    pub bin: usize,
    pub rule: RuleId,
    pub kind: WeightKind,
    pub mean_weight: f64,
    pub covariate_mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticsReport {
    pub covariate: Covariate,
    pub n_bins: usize,
    pub degenerate: bool,
    pub guard_excluded: usize,
    pub rows: Vec<StaticsRow>,
}

/// Mean effective and latent weight per rule within quantile bins of a
/// complexity covariate. Menus where the guard binds are left out.
pub fn comparative_statics(
    params: &GateParams,
    menus: &[Menu],
    features: &FeatureSet,
    matrix: &RuleMatrix,
    covariate: Covariate,
    k_bins: usize,
) -> Result<StaticsReport> {
    if menus.len() != features.len() || menus.len() != matrix.len() {
        return Err(Error::LengthMismatch(format!(
            "{} menus, {} feature rows, {} rule rows",
            menus.len(),
            features.len(),
            matrix.len()
        )));
    }
    let values: Vec<f64> = menus
        .iter()
        .map(|m| {
            let c = menu_covariates(m);
            match covariate {
                Covariate::Tc => c.tc,
                Covariate::RiskAsym => c.risk_asym,
            }
        })
        .collect();
    let bins = decile_bins(&values, k_bins)?;
    let preds = predict_all(params, features, matrix);
    let nb = bins.n_bins;
    let mut eff = vec![[0.0; N_RULES]; nb];
    let mut lat = vec![[0.0; N_RULES]; nb];
    let mut cov = vec![0.0; nb];
    let mut count = vec![0usize; nb];
    let mut guard_excluded = 0;
    for (i, p) in preds.iter().enumerate() {
        if p.guard_hit {
            guard_excluded += 1;
            continue;
        }
        let b = bins.bins[i];
        count[b] += 1;
        cov[b] += values[i];
        for j in 0..N_RULES {
            eff[b][j] += p.q_tilde[j];
            lat[b][j] += p.q[j];
        }
    }
    let mut rows = Vec::new();
    for b in 0..nb {
        let n = count[b];
        let scale = if n == 0 { f64::NAN } else { 1.0 / n as f64 };
        for (kind, table) in [(WeightKind::Effective, &eff), (WeightKind::Latent, &lat)] {
            for &rule in &params.rules {
                rows.push(StaticsRow {
                    bin: b,
                    rule,
                    kind,
                    mean_weight: table[b][rule.index()] * scale,
                    covariate_mean: cov[b] * scale,
                    n,
                });
            }
        }
    }
    Ok(StaticsReport {
        covariate,
        n_bins: nb,
        degenerate: bins.degenerate,
        guard_excluded,
        rows,
    })
}

impl StaticsReport {
    /// Long format: bin, rule, kind, mean_weight, covariate_mean, n.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin", "rule", "kind", "mean_weight", "covariate_mean", "n"])?;
        for r in &self.rows {
            let kind = match r.kind {
                WeightKind::Effective => "effective",
                WeightKind::Latent => "latent",
            };
            w.write_record([
                r.bin.to_string(),
                r.rule.to_string(),
                kind.to_string(),
                r.mean_weight.to_string(),
                r.covariate_mean.to_string(),
                r.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// External reference scores for completeness. The defaults are published
/// constants (expected-utility baseline and a flexible neural benchmark on
/// choices13k); the models behind them are not part of this crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScores {
    pub baseline_mse: f64,
    pub flexible_mse: f64,
}

impl Default for BenchmarkScores {
    fn default() -> Self {
        BenchmarkScores {
            baseline_mse: 0.02215,
            flexible_mse: 0.01139,
        }
    }
}

/// Share of the baseline-to-flexible MSE gap closed by a model.
pub fn completeness(model_mse: f64, bench: &BenchmarkScores) -> Result<f64> {
    let gap = bench.baseline_mse - bench.flexible_mse;
    if !(gap > 0.0) || !gap.is_finite() {
        return Err(Error::DegenerateDenominator {
            baseline: bench.baseline_mse,
            flexible: bench.flexible_mse,
        });
    }
    Ok((bench.baseline_mse - model_mse) / gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationFit {
    pub split: usize,
    pub permutation: usize,
    pub model_mse: f64,
    pub constant_mse: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictivenessReport {
    pub learner: String,
    pub learning_rate: f64,
    pub ratio: f64,
    pub fits: Vec<PermutationFit>,
}

/// Fit to targets shuffled across the training menus of every split,
/// measured as in-sample MSE over the constant predictor's in-sample MSE and
/// averaged. Near 1 means the model cannot absorb structureless variation.
pub fn restrictiveness<L: Learner>(
    problem: &Problem<'_>,
    learner: &L,
    plan: &SplitPlan,
    permutations: usize,
    lr: f64,
    seed: u64,
) -> Result<RestrictivenessReport> {
    if permutations == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    let splits = (0..plan.n_splits)
        .map(|s| plan.split(problem.len(), s))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..splits.len())
        .flat_map(|s| (0..permutations).map(move |p| (s, p)))
        .collect();
    let fits: Vec<PermutationFit> = jobs
        .par_iter()
        .map(|&(s, p)| {
            let rows = &splits[s].train;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((s * permutations + p) as u64 + 1);
            let mut ys: Vec<f64> = rows.iter().map(|&i| problem.targets[i]).collect();
            ys.shuffle(&mut rng);
            let model = learner.fit(problem, rows, &ys, lr)?;
            let preds: Vec<f64> = rows.iter().map(|&i| learner.predict(&model, problem, i)).collect();
            let model_mse = mse(&preds, &ys)?;
            let m = mean(&ys);
            let constant_mse = mse(&vec![m; ys.len()], &ys)?;
            if !(constant_mse > 0.0) {
                return Err(Error::InvalidArgument("permuted targets are constant".into()));
            }
            Ok(PermutationFit {
                split: s,
                permutation: p,
                model_mse,
                constant_mse,
                ratio: model_mse / constant_mse,
            })
        })
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = fits.iter().map(|f| f.ratio).collect();
    Ok(RestrictivenessReport {
        learner: learner.name(),
        learning_rate: lr,
        ratio: mean(&ratios),
        fits,
    })
}

/// How the restricted libraries are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    /// Top-k rules by training responsibility.
    Rules,
    /// Top-k families by summed training responsibility; every rule of a chosen family is kept.
    Families,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossfitRow {
    pub k: usize,
    pub mean_mse: f64,
    pub sd_mse: f64,
    /// `100·[1 − (MSE_k − MSE_full)/MSE_full]` on split means.
    pub retention: f64,
    pub per_fold_mse: Vec<f64>,
    /// Fraction of splits that kept each rule, in `RuleId::ALL` order.
    pub selection_frequency: [f64; N_RULES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossfitReport {
    pub selection: Selection,
    pub learning_rate: f64,
    pub full_mse: f64,
    pub per_fold_full: Vec<f64>,
    pub rows: Vec<CrossfitRow>,
}

/// Library kept at size `k`, in canonical rule order.
pub fn top_k(w: &[f64; N_RULES], library: &[RuleId], k: usize, selection: Selection) -> Vec<RuleId> {
    let mut keep = [false; N_RULES];
    match selection {
        Selection::Rules => {
            let mut order: Vec<RuleId> = library.to_vec();
            order.sort_by(|a, b| w[b.index()].total_cmp(&w[a.index()]).then(a.index().cmp(&b.index())));
            for r in order.into_iter().take(k) {
                keep[r.index()] = true;
            }
        }
        Selection::Families => {
            let mut fams: Vec<(Family, f64)> = Family::ALL
                .iter()
                .map(|&f| {
                    (
                        f,
                        library.iter().filter(|r| r.family() == f).map(|r| w[r.index()]).sum(),
                    )
                })
                .filter(|(f, _)| library.iter().any(|r| r.family() == *f))
                .collect();
            fams.sort_by(|a, b| b.1.total_cmp(&a.1));
            for (f, _) in fams.into_iter().take(k) {
                for r in library.iter().filter(|r| r.family() == f) {
                    keep[r.index()] = true;
                }
            }
        }
    }
    library.iter().copied().filter(|r| keep[r.index()]).collect()
}

/// Per split: fit the full library on the training set, rank by training
/// responsibility, refit the top-k library and score the test set.
pub fn crossfit_topk(
    problem: &Problem<'_>,
    base: &RuleGating,
    plan: &SplitPlan,
    lr: f64,
    ks: &[usize],
    selection: Selection,
) -> Result<CrossfitReport> {
    let limit = match selection {
        Selection::Rules => base.rules.len(),
        Selection::Families => Family::ALL.len(),
    };
    if ks.iter().any(|&k| k == 0 || k > limit) {
        return Err(Error::InvalidArgument(format!("k must lie in 1..={limit}")));
    }
    let splits = (0..plan.n_splits)
        .map(|s| plan.split(problem.len(), s))
        .collect::<Result<Vec<_>>>()?;
    let score = |learner: &RuleGating, model: &GateParams, rows: &[usize]| -> Result<f64> {
        let preds: Vec<f64> = rows.iter().map(|&i| learner.predict(model, problem, i)).collect();
        let ys: Vec<f64> = rows.iter().map(|&i| problem.targets[i]).collect();
        mse(&preds, &ys)
    };
    // Per split: full test MSE, then (test MSE, kept library) per k.
    type SplitResult = (f64, Vec<(f64, Vec<RuleId>)>);
    let per_split: Vec<SplitResult> = splits
        .par_iter()
        .map(|sp| {
            let ys: Vec<f64> = sp.train.iter().map(|&i| problem.targets[i]).collect();
            let full = base.fit(problem, &sp.train, &ys, lr)?;
            let full_mse = score(base, &full, &sp.test)?;
            let w = responsibilities(
                &full,
                &problem.features.subset(&sp.train),
                &problem.matrix.subset(&sp.train),
            )
            .w;
            let per_k = ks
                .iter()
                .map(|&k| {
                    let lib = top_k(&w, &base.rules, k, selection);
                    if lib == base.rules {
                        return Ok((full_mse, lib));
                    }
                    let learner = RuleGating {
                        rules: lib.clone(),
                        train: base.train.clone(),
                    };
                    let model = learner.fit(problem, &sp.train, &ys, lr)?;
                    Ok((score(&learner, &model, &sp.test)?, lib))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((full_mse, per_k))
        })
        .collect::<Result<_>>()?;
    let per_fold_full: Vec<f64> = per_split.iter().map(|s| s.0).collect();
    let full_mse = mean(&per_fold_full);
    let n = per_split.len() as f64;
    let rows = ks
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            let per_fold_mse: Vec<f64> = per_split.iter().map(|s| s.1[ki].0).collect();
            let mut selection_frequency = [0.0; N_RULES];
            for s in &per_split {
                for r in &s.1[ki].1 {
                    selection_frequency[r.index()] += 1.0 / n;
                }
            }
            let m = mean(&per_fold_mse);
            CrossfitRow {
                k,
                mean_mse: m,
                sd_mse: sample_sd(&per_fold_mse),
                retention: 100.0 * (1.0 - (m - full_mse) / full_mse),
                per_fold_mse,
                selection_frequency,
            }
        })
        .collect();
    Ok(CrossfitReport {
        selection,
        learning_rate: lr,
        full_mse,
        per_fold_full,
        rows,
    })
}

impl CrossfitReport {
    /// k, mean_mse, sd_mse, retention, then one selection-frequency column per rule.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["k", "mean_mse", "sd_mse", "retention"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(RuleId::ALL.iter().map(|r| format!("sel_{r}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.k.to_string(),
                r.mean_mse.to_string(),
                r.sd_mse.to_string(),
                r.retention.to_string(),
            ];
            rec.extend(r.selection_frequency.iter().map(|f| f.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cv::ConstantPredictor;
    use crate::gate::TrainConfig;
    use crate::synth::{generate_synthetic, FeatureMode, SynthConfig};

    #[test]
    fn concentration_extremes() {
        let u = concentration(&[1.0 / 12.0; 12]).unwrap();
        assert!((u.hhi - 1.0 / 12.0).abs() < 1e-15);
        assert!((u.n_eff - 12.0).abs() < 1e-12);
        let mut point = [0.0; 12];
        point[3] = 1.0;
        let p = concentration(&point).unwrap();
        assert_eq!((p.hhi, p.n_eff), (1.0, 1.0));
        assert!(matches!(concentration(&[0.5, 0.6]), Err(Error::NotSimplex(_))));
        assert!(matches!(concentration(&[1.5, -0.5]), Err(Error::NotSimplex(_))));
    }

    #[test]
    fn completeness_endpoints() {
        let b = BenchmarkScores::default();
        assert_eq!(completeness(b.baseline_mse, &b).unwrap(), 0.0);
        assert_eq!(completeness(b.flexible_mse, &b).unwrap(), 1.0);
        let bad = BenchmarkScores {
            baseline_mse: 0.01,
            flexible_mse: 0.02,
        };
        assert!(matches!(
            completeness(0.01, &bad),
            Err(Error::DegenerateDenominator { .. })
        ));
    }

    fn small_problem() -> crate::synth::Synthetic {
        let names: Vec<String> = crate::GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        let truth = GateParams::zeros(&RuleId::ALL, &names, 1.0);
        generate_synthetic(
            &truth,
            &SynthConfig {
                n_cells: 4,
                menus_per_cell: 30,
                n_trials: Some(50),
                feature_mode: FeatureMode::Computed,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn constant_predictor_is_exactly_restrictive() {
        let s = small_problem();
        let y = s.dataset.targets().unwrap();
        let p = Problem::new(&s.features, &s.matrix, &y, None).unwrap();
        let plan = SplitPlan {
            n_splits: 3,
            ..Default::default()
        };
        let r = restrictiveness(&p, &ConstantPredictor, &plan, 2, 0.0, 1).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert!(r.fits.iter().all(|f| f.ratio == 1.0));
    }

    #[test]
    fn statics_effective_weights_sum_to_one_per_bin() {
        let s = small_problem();
        let r = comparative_statics(&s.params, &s.dataset.menus, &s.features, &s.matrix, Covariate::Tc, 4).unwrap();
        for b in 0..r.n_bins {
            let total: f64 = r
                .rows
                .iter()
                .filter(|x| x.bin == b && x.kind == WeightKind::Effective)
                .map(|x| x.mean_weight)
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
            // Zero gate: latent weights are uniform in every bin.
            for x in r.rows.iter().filter(|x| x.bin == b && x.kind == WeightKind::Latent) {
                assert!((x.mean_weight - 1.0 / 12.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_k_keeps_canonical_order_and_whole_families() {
        let mut w = [0.0; N_RULES];
        w[RuleId::SAL2.index()] = 0.3;
        w[RuleId::A1.index()] = 0.2;
        w[RuleId::REG.index()] = 0.25;
        let lib = RuleId::ALL.to_vec();
        assert_eq!(top_k(&w, &lib, 2, Selection::Rules), vec![RuleId::SAL2, RuleId::REG]);
        assert_eq!(top_k(&w, &lib, 12, Selection::Rules), lib);
        assert_eq!(top_k(&w, &lib, 1, Selection::Families), vec![RuleId::SAL, RuleId::SAL2]);
    }

    #[test]
    fn crossfit_full_size_equals_full_model() {
        let s = small_problem();
        let y = s.dataset.targets().unwrap();
        let p = Problem::new(&s.features, &s.matrix, &y, None).unwrap();
        let plan = SplitPlan {
            n_splits: 2,
            ..Default::default()
        };
        let base = RuleGating::new(
            &RuleId::ALL,
            TrainConfig {
                epochs: 30,
                ..Default::default()
            },
        );
        let r = crossfit_topk(&p, &base, &plan, 0.01, &[12], Selection::Rules).unwrap();
        assert_eq!(r.rows[0].per_fold_mse, r.per_fold_full);
        assert_eq!(r.rows[0].retention, 100.0);
        assert!(r.rows[0].selection_frequency.iter().all(|&f| (f - 1.0).abs() < 1e-12));
    }
}
