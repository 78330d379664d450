//! Softmax-gated mixture over active rules and its MSE training loop.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::rules::{RuleId, RuleMatrix, RuleOutcome, N_RULES};

pub const PARAMS_VERSION: u32 = 1;
pub const DEFAULT_M_MIN: f64 = 1e-6;

/// Per-rule intercepts and feature slopes of the softmax gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub version: u32,
    pub rules: Vec<RuleId>,
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub feature_names: Vec<String>,
    pub rescale_factor: f64,
    pub m_min: f64,
    /// Rule pinned to (0, 0) when the identification normalization is applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<RuleId>,
}

impl GateParams {
    pub fn zeros(rules: &[RuleId], feature_names: &[String], rescale_factor: f64) -> Self {
        GateParams {
            version: PARAMS_VERSION,
            rules: rules.to_vec(),
            alpha: vec![0.0; rules.len()],
            beta: vec![vec![0.0; feature_names.len()]; rules.len()],
            feature_names: feature_names.to_vec(),
            rescale_factor,
            m_min: DEFAULT_M_MIN,
            baseline: None,
        }
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PARAMS_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        let n = self.rules.len();
        if n == 0 {
            return Err(Error::InvalidArgument("gate needs at least one rule".into()));
        }
        if self.alpha.len() != n || self.beta.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.alpha.len().min(self.beta.len()),
            });
        }
        let d = self.n_features();
        if let Some(b) = self.beta.iter().find(|b| b.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: b.len(),
            });
        }
        let finite = self
            .alpha
            .iter()
            .chain(self.beta.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("gate parameters"));
        }
        if !(self.m_min > 0.0) || !(self.rescale_factor > 0.0) {
            return Err(Error::InvalidArgument(
                "m_min and rescale_factor must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Flat layout used by the optimizer: per rule `[alpha, beta_1..beta_d]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.rules.len() * (1 + self.n_features()));
        for (a, b) in self.alpha.iter().zip(&self.beta) {
            v.push(*a);
            v.extend_from_slice(b);
        }
        v
    }

    pub fn set_flat(&mut self, theta: &[f64]) {
        let w = 1 + self.n_features();
        for (j, chunk) in theta.chunks(w).enumerate() {
            self.alpha[j] = chunk[0];
            self.beta[j].copy_from_slice(&chunk[1..]);
        }
    }

    /// Re-express the gate with `baseline` pinned to zero; predictions are unchanged.
    pub fn normalized(&self, baseline: RuleId) -> Result<GateParams> {
        let j0 = self
            .rules
            .iter()
            .position(|&r| r == baseline)
            .ok_or_else(|| Error::InvalidArgument(format!("{baseline} not in library")))?;
        let mut out = self.clone();
        let (a0, b0) = (self.alpha[j0], self.beta[j0].clone());
        for j in 0..out.rules.len() {
            out.alpha[j] -= a0;
            for (b, c) in out.beta[j].iter_mut().zip(&b0) {
                *b -= c;
            }
        }
        out.baseline = Some(baseline);
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: GateParams = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Gate output for one menu. Weight arrays are indexed by [`RuleId::index`];
/// rules outside the library carry zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub g: f64,
    pub q: [f64; N_RULES],
    pub q_tilde: [f64; N_RULES],
    pub guard_hit: bool,
}

fn softmax_into(params: &GateParams, z: &[f64], out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        let dot: f64 = params.beta[j].iter().zip(z).map(|(b, x)| b * x).sum();
        *o = params.alpha[j] + dot;
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax propensities over the library rules, in library order.
pub fn gate_weights(params: &GateParams, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != params.n_features() {
        return Err(Error::DimensionMismatch {
            expected: params.n_features(),
            got: z.len(),
        });
    }
    let mut q = vec![0.0; params.rules.len()];
    softmax_into(params, z, &mut q);
    Ok(q)
}

/// Gated prediction. Panics if `z` has the wrong length; use [`gate_weights`]
/// for a checked call.
pub fn predict(params: &GateParams, z: &[f64], row: &[RuleOutcome; N_RULES]) -> Prediction {
    assert_eq!(z.len(), params.n_features(), "feature dimension");
    let mut local = [0.0; N_RULES];
    let n = params.rules.len();
    softmax_into(params, z, &mut local[..n]);
    let mut q = [0.0; N_RULES];
    let (mut ell, mut m) = (0.0, 0.0);
    for (j, r) in params.rules.iter().enumerate() {
        let o = row[r.index()];
        q[r.index()] = local[j];
        if o.active {
            m += local[j];
            if o.left {
                ell += local[j];
            }
        }
    }
    let mut q_tilde = [0.0; N_RULES];
    let guard_hit = m <= params.m_min;
    if !guard_hit {
        for r in &params.rules {
            if row[r.index()].active {
                q_tilde[r.index()] = q[r.index()] / m;
            }
        }
    }
    let g = (ell / m.max(params.m_min)).clamp(0.0, 1.0);
    Prediction {
        g,
        q,
        q_tilde,
        guard_hit,
    }
}

pub fn predict_all(params: &GateParams, features: &FeatureSet, matrix: &RuleMatrix) -> Vec<Prediction> {
    (0..matrix.len())
        .map(|i| predict(params, features.row(i), &matrix.rows[i]))
        .collect()
}

/// Average conditional-on-activity weight per rule over non-guard menus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    pub w: [f64; N_RULES],
    pub guard_excluded: usize,
}

pub fn responsibilities(params: &GateParams, features: &FeatureSet, matrix: &RuleMatrix) -> Responsibilities {
    let mut w = [0.0; N_RULES];
    let mut used = 0usize;
    let mut excluded = 0usize;
    for p in predict_all(params, features, matrix) {
        if p.guard_hit {
            excluded += 1;
            continue;
        }
        used += 1;
        for (a, b) in w.iter_mut().zip(&p.q_tilde) {
            *a += b;
        }
    }
    if used > 0 {
        for a in &mut w {
            *a /= used as f64;
        }
    }
    Responsibilities {
        w,
        guard_excluded: excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    pub m_min: f64,
    pub seed: u64,
    pub lr_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 1000,
            clip_norm: 1.0,
            m_min: DEFAULT_M_MIN,
            seed: 0,
            lr_grid: vec![0.001, 0.01, 0.1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.m_min > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate, m_min and clip_norm must be positive".into(),
            ));
        }
        if self.lr_grid.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument("learning-rate grid must be positive".into()));
        }
        Ok(())
    }
}

/// The training problem: which menus, which rules, what targets.
#[derive(Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a FeatureSet,
    pub matrix: &'a RuleMatrix,
    pub rows: &'a [usize],
    pub targets: &'a [f64],
}

const CHUNK: usize = 256;

/// Mean squared error and its gradient in the flat parameter layout.
pub fn loss_and_gradient(params: &GateParams, batch: &Batch<'_>) -> (f64, Vec<f64>) {
    let n_rules = params.rules.len();
    let w = 1 + params.n_features();
    let dim = n_rules * w;
    let partials: Vec<(f64, Vec<f64>)> = batch
        .rows
        .par_chunks(CHUNK)
        .zip(batch.targets.par_chunks(CHUNK))
        .map(|(rows, ys)| {
            let mut grad = vec![0.0; dim];
            let mut loss = 0.0;
            let mut q = [0.0; N_RULES];
            for (&i, &y) in rows.iter().zip(ys) {
                let z = batch.features.row(i);
                let row = &batch.matrix.rows[i];
                softmax_into(params, z, &mut q[..n_rules]);
                let (mut ell, mut m) = (0.0, 0.0);
                for (j, r) in params.rules.iter().enumerate() {
                    let o = row[r.index()];
                    if o.active {
                        m += q[j];
                        if o.left {
                            ell += q[j];
                        }
                    }
                }
                let guard = m <= params.m_min;
                let denom = m.max(params.m_min);
                let g = ell / denom;
                let resid = g - y;
                loss += resid * resid;
                for (j, r) in params.rules.iter().enumerate() {
                    let o = row[r.index()];
                    let l = o.decisive_left() as u8 as f64;
                    let a = o.active as u8 as f64;
                    // Off the guard: q_j (L_j - g A_j) / m. On it the denominator is constant.
                    let dg = if guard {
                        q[j] * (l - ell) / denom
                    } else {
                        q[j] * (l - g * a) / denom
                    };
                    let c = 2.0 * resid * dg;
                    if c != 0.0 {
                        let gj = &mut grad[j * w..(j + 1) * w];
                        gj[0] += c;
                        for (gk, x) in gj[1..].iter_mut().zip(z) {
                            *gk += c * x;
                        }
                    }
                }
            }
            (loss, grad)
        })
        .collect();
    let n = batch.rows.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    (loss / n, grad)
}

pub fn mse_on(params: &GateParams, batch: &Batch<'_>) -> f64 {
    let n = batch.rows.len();
    if n == 0 {
        return 0.0;
    }
    batch
        .rows
        .iter()
        .zip(batch.targets)
        .map(|(&i, &y)| {
            let g = predict(params, batch.features.row(i), &batch.matrix.rows[i]).g;
            (g - y) * (g - y)
        })
        .sum::<f64>()
        / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub params: GateParams,
    /// Training MSE before each update, then after the last one.
    pub trace: Vec<f64>,
}

/// Full-batch Adam with global-norm clipping from a zero (uniform-gate) start.
pub fn train(rules: &[RuleId], batch: &Batch<'_>, config: &TrainConfig) -> Result<TrainResult> {
    config.validate()?;
    if batch.rows.len() != batch.targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} rows vs {} targets",
            batch.rows.len(),
            batch.targets.len()
        )));
    }
    if batch.rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch.targets.iter().any(|y| !(0.0..=1.0).contains(y)) {
        return Err(Error::InvalidArgument("targets must lie in [0, 1]".into()));
    }
    let mut params = GateParams::zeros(rules, &batch.features.names, batch.features.rescale_factor);
    params.m_min = config.m_min;
    let mut theta = params.to_flat();
    let mut m1 = vec![0.0; theta.len()];
    let mut m2 = vec![0.0; theta.len()];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut trace = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, mut grad) = loss_and_gradient(&params, batch);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        trace.push(loss);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > config.clip_norm {
            let s = config.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let t = (epoch + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for k in 0..theta.len() {
            m1[k] = b1 * m1[k] + (1.0 - b1) * grad[k];
            m2[k] = b2 * m2[k] + (1.0 - b2) * grad[k] * grad[k];
            theta[k] -= config.learning_rate * (m1[k] / c1) / ((m2[k] / c2).sqrt() + eps);
        }
        params.set_flat(&theta);
    }
    let last = mse_on(&params, batch);
    if !last.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: config.epochs });
    }
    trace.push(last);
    Ok(TrainResult { params, trace })
}

/// Central finite-difference check of the analytic gradient on `n_coords`
/// random coordinates. Menus where the guard binds are dropped first.
/// Relative error uses `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(params: &GateParams, batch: &Batch<'_>, n_coords: usize, seed: u64) -> f64 {
    let (rows, targets): (Vec<usize>, Vec<f64>) = batch
        .rows
        .iter()
        .zip(batch.targets)
        .filter(|(&i, _)| !predict(params, batch.features.row(i), &batch.matrix.rows[i]).guard_hit)
        .map(|(&i, &y)| (i, y))
        .unzip();
    let clean = Batch {
        rows: &rows,
        targets: &targets,
        ..*batch
    };
    let (_, grad) = loss_and_gradient(params, &clean);
    let theta = params.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<usize> = if n_coords >= theta.len() {
        (0..theta.len()).collect()
    } else {
        sample(&mut rng, theta.len(), n_coords).into_vec()
    };
    let h = 1e-5;
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for k in coords {
        let mut t = theta.clone();
        t[k] = theta[k] + h;
        p.set_flat(&t);
        let up = loss_and_gradient(&p, &clean).0;
        t[k] = theta[k] - h;
        p.set_flat(&t);
        let down = loss_and_gradient(&p, &clean).0;
        let numeric = (up - down) / (2.0 * h);
        let denom = grad[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((grad[k] - numeric).abs() / denom);
    }
    worst
}

/// Random gate parameters with entries uniform on `[-scale, scale]`.
pub fn random_params<R: Rng>(rng: &mut R, rules: &[RuleId], feature_names: &[String], scale: f64) -> GateParams {
    let mut p = GateParams::zeros(rules, feature_names, 1.0);
    for a in &mut p.alpha {
        *a = rng.random_range(-scale..=scale);
    }
    for b in p.beta.iter_mut().flatten() {
        *b = rng.random_range(-scale..=scale);
    }
    p
}
