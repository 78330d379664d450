//! Train/test splits, the two-pass learning-rate protocol, metrics and
//! frozen-parameter evaluation on a second dataset.

use std::collections::HashMap;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::{Encoding, FeatureSet};
use crate::gate::{predict, train, Batch, GateParams, TrainConfig};
use crate::linalg::{mean, sample_sd};
use crate::rules::{build_rule_matrix, Activity, RuleId, RuleMatrix};

pub const RUN_RECORD_VERSION: u32 = 1;
pub const LOGLOSS_CLIP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n_splits: usize,
    pub train_fraction: f64,
    /// Share of each training set held out for learning-rate selection.
    pub inner_val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            n_splits: 50,
            train_fraction: 0.9,
            inner_val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Index sets of one split, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub sub_train: Vec<usize>,
    pub validation: Vec<usize>,
}

fn holdout(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 {
            return Err(Error::InvalidArgument("need at least one split".into()));
        }
        for (name, v) in [
            ("train_fraction", self.train_fraction),
            ("inner_val_fraction", self.inner_val_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// Split `s` of a dataset with `n` menus; depends only on the plan, `n` and `s`.
    pub fn split(&self, n: usize, s: usize) -> Result<Split> {
        self.validate()?;
        if n < 4 {
            return Err(Error::TooFewMenus { needed: 4, got: n });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(s as u64 + 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let n_test = holdout(n, 1.0 - self.train_fraction);
        let mut test = idx[..n_test].to_vec();
        let mut train = idx[n_test..].to_vec();
        let n_val = holdout(train.len(), self.inner_val_fraction);
        let mut shuffled = train.clone();
        shuffled.shuffle(&mut rng);
        let mut validation = shuffled[..n_val].to_vec();
        let mut sub_train = shuffled[n_val..].to_vec();
        for v in [&mut test, &mut train, &mut validation, &mut sub_train] {
            v.sort_unstable();
        }
        Ok(Split {
            train,
            test,
            sub_train,
            validation,
        })
    }
}

/// Everything a learner may look at. Targets are passed separately to
/// [`Learner::fit`] so they can be permuted.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub features: &'a FeatureSet,
    pub matrix: &'a RuleMatrix,
    pub targets: &'a [f64],
    pub trials: Option<&'a [f64]>,
}

impl<'a> Problem<'a> {
    pub fn new(
        features: &'a FeatureSet,
        matrix: &'a RuleMatrix,
        targets: &'a [f64],
        trials: Option<&'a [f64]>,
    ) -> Result<Self> {
        let n = targets.len();
        if features.len() != n || matrix.len() != n || trials.is_some_and(|t| t.len() != n) {
            return Err(Error::LengthMismatch(format!(
                "features {}, rule matrix {}, targets {n}",
                features.len(),
                matrix.len()
            )));
        }
        Ok(Problem {
            features,
            matrix,
            targets,
            trials,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn gather(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&i| self.targets[i]).collect()
    }
}

pub trait Learner: Sync {
    type Model: Send + Sync;
    fn name(&self) -> String;
    /// Learners without a step size are run once per split with rate 0.
    fn uses_learning_rate(&self) -> bool {
        true
    }
    fn fit(&self, problem: &Problem<'_>, rows: &[usize], targets: &[f64], lr: f64) -> Result<Self::Model>;
    fn predict(&self, model: &Self::Model, problem: &Problem<'_>, i: usize) -> f64;
}

/// The gated rule mixture trained by full-batch Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleGating {
    pub rules: Vec<RuleId>,
    pub train: TrainConfig,
}

impl RuleGating {
    pub fn new(rules: &[RuleId], train: TrainConfig) -> Self {
        RuleGating {
            rules: rules.to_vec(),
            train,
        }
    }
}

impl Learner for RuleGating {
    type Model = GateParams;

    fn name(&self) -> String {
        format!("rule-gating[{}]", self.rules.len())
    }

    fn fit(&self, problem: &Problem<'_>, rows: &[usize], targets: &[f64], lr: f64) -> Result<GateParams> {
        let batch = Batch {
            features: problem.features,
            matrix: problem.matrix,
            rows,
            targets,
        };
        let config = TrainConfig {
            learning_rate: lr,
            ..self.train.clone()
        };
        Ok(train(&self.rules, &batch, &config)?.params)
    }

    fn predict(&self, model: &GateParams, problem: &Problem<'_>, i: usize) -> f64 {
        predict(model, problem.features.row(i), &problem.matrix.rows[i]).g
    }
}

/// Predicts the training mean everywhere.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstantPredictor;

impl Learner for ConstantPredictor {
    type Model = f64;

    fn name(&self) -> String {
        "constant".into()
    }

    fn uses_learning_rate(&self) -> bool {
        false
    }

    fn fit(&self, _: &Problem<'_>, _: &[usize], targets: &[f64], _: f64) -> Result<f64> {
        if targets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(mean(targets))
    }

    fn predict(&self, model: &f64, _: &Problem<'_>, _: usize) -> f64 {
        *model
    }
}

/// One free parameter per training menu: memorizes its target and falls
/// back to the training mean elsewhere.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LookupTable;

impl Learner for LookupTable {
    type Model = (HashMap<usize, f64>, f64);

    fn name(&self) -> String {
        "lookup".into()
    }

    fn uses_learning_rate(&self) -> bool {
        false
    }

    fn fit(&self, _: &Problem<'_>, rows: &[usize], targets: &[f64], _: f64) -> Result<Self::Model> {
        if targets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok((
            rows.iter().copied().zip(targets.iter().copied()).collect(),
            mean(targets),
        ))
    }

    fn predict(&self, model: &Self::Model, _: &Problem<'_>, i: usize) -> f64 {
        model.0.get(&i).copied().unwrap_or(model.1)
    }
}

pub fn mse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(preds.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64)
}

/// Squared error weighted by trial counts.
pub fn mse_w(preds: &[f64], targets: &[f64], trials: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.len() != trials.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions, {} targets, {} trial counts",
            preds.len(),
            targets.len(),
            trials.len()
        )));
    }
    let total: f64 = trials.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("trial counts sum to zero".into()));
    }
    Ok(preds
        .iter()
        .zip(targets)
        .zip(trials)
        .map(|((p, y), n)| n * (p - y) * (p - y))
        .sum::<f64>()
        / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pass {
    /// Sub-train fit scored on the inner validation set.
    Select,
    /// Full-train fit scored on the test set.
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub split: usize,
    pub pass: Pass,
    pub learning_rate: f64,
    pub mse: f64,
    pub mse_w: Option<f64>,
    pub n_fit: usize,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub kind: String,
    pub learner: String,
    /// Snapshot of the configuration that produced the run.
    pub config: serde_json::Value,
    pub plan: SplitPlan,
    pub lr_grid: Vec<f64>,
    pub selected_lr: f64,
    pub folds: Vec<FoldRecord>,
    pub mean_test_mse: f64,
    pub sd_test_mse: f64,
    pub mean_test_mse_w: Option<f64>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunRecord {
    /// Test MSE per split at the selected learning rate.
    pub fn test_mse(&self) -> Vec<f64> {
        self.selected_folds().map(|f| f.mse).collect()
    }

    pub fn selected_folds(&self) -> impl Iterator<Item = &FoldRecord> {
        self.folds
            .iter()
            .filter(move |f| f.pass == Pass::Evaluate && f.learning_rate == self.selected_lr)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per fold: split, pass, learning_rate, mse, mse_w, n_fit, n_eval.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["split", "pass", "learning_rate", "mse", "mse_w", "n_fit", "n_eval"])?;
        for f in &self.folds {
            w.write_record([
                f.split.to_string(),
                format!("{:?}", f.pass).to_lowercase(),
                f.learning_rate.to_string(),
                f.mse.to_string(),
                f.mse_w.map_or(String::new(), |v| v.to_string()),
                f.n_fit.to_string(),
                f.n_eval.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Paired per-split differences `b − a` of test MSE at each run's selected rate.
pub fn paired_deltas(a: &RunRecord, b: &RunRecord) -> Result<Vec<f64>> {
    let (x, y) = (a.test_mse(), b.test_mse());
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(format!("{} vs {} splits", x.len(), y.len())));
    }
    Ok(y.iter().zip(&x).map(|(b, a)| b - a).collect())
}

fn score<L: Learner>(
    learner: &L,
    model: &L::Model,
    problem: &Problem<'_>,
    rows: &[usize],
) -> Result<(f64, Option<f64>)> {
    let preds: Vec<f64> = rows.iter().map(|&i| learner.predict(model, problem, i)).collect();
    let ys = problem.gather(rows);
    let weighted = match problem.trials {
        Some(t) => Some(mse_w(&preds, &ys, &rows.iter().map(|&i| t[i]).collect::<Vec<_>>())?),
        None => None,
    };
    Ok((mse(&preds, &ys)?, weighted))
}

/// Result of [`run_cv`]: the record and the evaluation-pass model of every
/// split at the selected learning rate.
pub struct CvRun<M> {
    pub record: RunRecord,
    pub models: Vec<M>,
    pub splits: Vec<Split>,
}

/// Two-pass protocol. Pass A fits each candidate rate on the sub-training
/// set of every split and the rate with the lowest mean validation MSE is
/// chosen. Pass B then refits on each full training set at every rate and
/// scores the test set; the reported performance uses the chosen rate.
pub fn run_cv<L: Learner>(
    problem: &Problem<'_>,
    learner: &L,
    plan: &SplitPlan,
    lr_grid: &[f64],
) -> Result<CvRun<L::Model>> {
    let started_unix = unix_now();
    plan.validate()?;
    let grid: Vec<f64> = if learner.uses_learning_rate() {
        if lr_grid.is_empty() {
            return Err(Error::InvalidArgument("learning-rate grid is empty".into()));
        }
        lr_grid.to_vec()
    } else {
        vec![0.0]
    };
    let splits: Vec<Split> = (0..plan.n_splits)
        .map(|s| plan.split(problem.len(), s))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..splits.len())
        .flat_map(|s| (0..grid.len()).map(move |g| (s, g)))
        .collect();

    let pass_a: Vec<FoldRecord> = jobs
        .par_iter()
        .map(|&(s, g)| {
            let sp = &splits[s];
            let model = learner.fit(problem, &sp.sub_train, &problem.gather(&sp.sub_train), grid[g])?;
            let (m, mw) = score(learner, &model, problem, &sp.validation)?;
            Ok(FoldRecord {
                split: s,
                pass: Pass::Select,
                learning_rate: grid[g],
                mse: m,
                mse_w: mw,
                n_fit: sp.sub_train.len(),
                n_eval: sp.validation.len(),
            })
        })
        .collect::<Result<_>>()?;
    // Selection reads validation scores only; the evaluation pass has not run yet.
    let selected = (0..grid.len())
        .map(|g| {
            let v: Vec<f64> = pass_a
                .iter()
                .filter(|f| f.learning_rate == grid[g])
                .map(|f| f.mse)
                .collect();
            (g, mean(&v))
        })
        .fold(
            (0, f64::INFINITY),
            |best, (g, m)| if m < best.1 { (g, m) } else { best },
        )
        .0;
    let selected_lr = grid[selected];

    let pass_b: Vec<(FoldRecord, Option<L::Model>)> = jobs
        .par_iter()
        .map(|&(s, g)| {
            let sp = &splits[s];
            let model = learner.fit(problem, &sp.train, &problem.gather(&sp.train), grid[g])?;
            let (m, mw) = score(learner, &model, problem, &sp.test)?;
            let rec = FoldRecord {
                split: s,
                pass: Pass::Evaluate,
                learning_rate: grid[g],
                mse: m,
                mse_w: mw,
                n_fit: sp.train.len(),
                n_eval: sp.test.len(),
            };
            Ok((rec, (g == selected).then_some(model)))
        })
        .collect::<Result<_>>()?;

    let mut folds = pass_a;
    let mut models = Vec::with_capacity(splits.len());
    for (rec, model) in pass_b {
        folds.push(rec);
        if let Some(m) = model {
            models.push(m);
        }
    }
    let chosen: Vec<&FoldRecord> = folds
        .iter()
        .filter(|f| f.pass == Pass::Evaluate && f.learning_rate == selected_lr)
        .collect();
    let test: Vec<f64> = chosen.iter().map(|f| f.mse).collect();
    let weighted: Option<Vec<f64>> = chosen.iter().map(|f| f.mse_w).collect();
    let record = RunRecord {
        version: RUN_RECORD_VERSION,
        kind: "cv".into(),
        learner: learner.name(),
        config: serde_json::Value::Null,
        plan: plan.clone(),
        lr_grid: grid,
        selected_lr,
        mean_test_mse: mean(&test),
        sd_test_mse: sample_sd(&test),
        mean_test_mse_w: weighted.map(|w| mean(&w)),
        folds,
        started_unix,
        finished_unix: unix_now(),
    };
    Ok(CvRun { record, models, splits })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub mean_test_mse: f64,
    pub sd_test_mse: f64,
    pub n_fit: usize,
}

pub const DEFAULT_CURVE_FRACTIONS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Test MSE when fitting on a leading share of each (shuffled) training set
/// at a fixed learning rate. The test sets are those of `plan`.
pub fn learning_curve<L: Learner>(
    problem: &Problem<'_>,
    learner: &L,
    plan: &SplitPlan,
    fractions: &[f64],
    lr: f64,
) -> Result<Vec<CurvePoint>> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::InvalidArgument("curve fractions must lie in (0, 1]".into()));
    }
    let splits: Vec<Split> = (0..plan.n_splits)
        .map(|s| plan.split(problem.len(), s))
        .collect::<Result<_>>()?;
    fractions
        .iter()
        .map(|&frac| {
            let res: Vec<(f64, usize)> = splits
                .par_iter()
                .enumerate()
                .map(|(s, sp)| {
                    let mut rows = sp.train.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5eed);
                    rng.set_stream(s as u64 + 1);
                    rows.shuffle(&mut rng);
                    let k = ((rows.len() as f64 * frac).round() as usize).clamp(1, rows.len());
                    let mut rows = rows[..k].to_vec();
                    rows.sort_unstable();
                    let model = learner.fit(problem, &rows, &problem.gather(&rows), lr)?;
                    Ok((score(learner, &model, problem, &sp.test)?.0, k))
                })
                .collect::<Result<_>>()?;
            let m: Vec<f64> = res.iter().map(|r| r.0).collect();
            Ok(CurvePoint {
                fraction: frac,
                mean_test_mse: mean(&m),
                sd_test_mse: sample_sd(&m),
                n_fit: res.iter().map(|r| r.1).sum::<usize>() / res.len().max(1),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortabilityReport {
    pub n_menus: usize,
    pub n_trials: usize,
    pub mse_menu: f64,
    pub brier_trial: f64,
    pub logloss_trial: f64,
}

/// Features for a new dataset under the scale frozen into `params`.
pub fn frozen_features(params: &GateParams, dataset: &Dataset) -> FeatureSet {
    FeatureSet::compute(&dataset.menus, params.rescale_factor, Encoding::Gate)
}

/// Evaluate frozen parameters on another dataset: menu-level MSE against the
/// observed rates, and Brier score and log-loss against individual choices.
pub fn portability(
    params: &GateParams,
    dataset: &Dataset,
    features: &FeatureSet,
    activity: Activity,
) -> Result<PortabilityReport> {
    if features.rescale_factor != params.rescale_factor {
        return Err(Error::RescaleMismatch {
            model: params.rescale_factor,
            features: features.rescale_factor,
        });
    }
    if features.len() != dataset.len() {
        return Err(Error::LengthMismatch(format!(
            "{} feature rows vs {} menus",
            features.len(),
            dataset.len()
        )));
    }
    let trials = dataset.trials.as_ref().ok_or(Error::MissingTrials)?;
    if trials.is_empty() {
        return Err(Error::MissingTrials);
    }
    let matrix = build_rule_matrix(&dataset.menus, activity);
    let g: Vec<f64> = (0..dataset.len())
        .map(|i| predict(params, features.row(i), &matrix.rows[i]).g)
        .collect();
    let mse_menu = mse(&g, &dataset.targets()?)?;
    let mut brier = 0.0;
    let mut logloss = 0.0;
    for t in trials {
        let p = *g
            .get(t.menu)
            .ok_or_else(|| Error::SchemaViolation(format!("trial refers to menu {} of {}", t.menu, g.len())))?;
        let y = if t.chose_left { 1.0 } else { 0.0 };
        brier += (p - y) * (p - y);
        let pc = p.clamp(LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP);
        logloss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    let n = trials.len() as f64;
    Ok(PortabilityReport {
        n_menus: dataset.len(),
        n_trials: trials.len(),
        mse_menu,
        brier_trial: brier / n,
        logloss_trial: logloss / n,
    })
}
