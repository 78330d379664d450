//! Two-step estimator: cellwise constrained least squares for normalized rule
//! weights, then a regression of log-weights on cell features.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::gate::{responsibilities, GateParams, DEFAULT_M_MIN, PARAMS_VERSION};
use crate::identification::{cell_systems, effective_dimension, restriction_from_rate, IdentConfig};
use crate::linalg::{numerical_rank, robust_sd};
use crate::lottery::Menu;
use crate::rules::{RuleId, RuleMatrix, RuleOutcome, N_RULES};

pub const DEFAULT_FLOOR: f64 = 1e-8;
pub const QP_MOVE_TOL: f64 = 1e-10;
pub const QP_MAX_ITER: usize = 500;
/// Ridge added to a zero bootstrap variance before inversion.
pub const VARIANCE_RIDGE: f64 = 1e-10;

/// Normalized weights recovered in one cell, in library order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellWeights {
    pub cell_id: usize,
    pub omega: Vec<f64>,
    pub residual_norm: f64,
    /// Rules whose weight sits at the floor.
    pub at_floor: Vec<RuleId>,
    pub iterations: usize,
    pub converged: bool,
}

fn baseline_index(library: &[RuleId], baseline: RuleId) -> Result<usize> {
    library
        .iter()
        .position(|&r| r == baseline)
        .ok_or_else(|| Error::InvalidArgument(format!("baseline {baseline} not in library")))
}

/// Blocks of a Gram matrix `G` over the free coordinates, so that
/// `ωᵀGω = xᵀQx + 2cᵀx + G₀₀` with `x = ω` minus the baseline entry.
fn reduced_normal(gram: &DMatrix<f64>, b: usize) -> (DMatrix<f64>, DVector<f64>) {
    let f = gram.ncols();
    let free: Vec<usize> = (0..f).filter(|&j| j != b).collect();
    let q = gram.select_rows(&free).select_columns(&free);
    let c = DVector::from_iterator(free.len(), free.iter().map(|&j| gram[(j, b)]));
    (q, c)
}

fn expand(x: &DVector<f64>, b: usize) -> Vec<f64> {
    let mut omega = Vec::with_capacity(x.len() + 1);
    omega.extend(x.iter().take(b));
    omega.push(1.0);
    omega.extend(x.iter().skip(b));
    omega
}

/// Unconstrained minimizer of `‖Hω‖²` with the baseline weight fixed at one.
pub fn closed_form_weights(h: &DMatrix<f64>, library: &[RuleId], baseline: RuleId) -> Result<Vec<f64>> {
    let b = baseline_index(library, baseline)?;
    let (q, c) = reduced_normal(&(h.transpose() * h), b);
    let rank = numerical_rank(&q);
    if rank < q.nrows() {
        return Err(Error::RankDeficientDesign {
            rank,
            needed: q.nrows(),
        });
    }
    let x = q.cholesky().ok_or(Error::SingularVariance)?.solve(&(-c));
    Ok(expand(&x, b))
}

fn solve_free(q: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = q.clone().cholesky() {
        return ch.solve(rhs);
    }
    let svd = q.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    svd.solve(rhs, tol).unwrap_or_else(|_| rhs.clone())
}

/// Minimize `‖Hω‖²` subject to `ω_{f₀} = 1` and `ω ≥ floor` by projected
/// Newton steps with an Armijo search along the projection arc, starting
/// from the uniform vector.
pub fn cell_weights(
    cell_id: usize,
    h: &DMatrix<f64>,
    library: &[RuleId],
    baseline: RuleId,
    floor: f64,
) -> Result<CellWeights> {
    cell_weights_gram(cell_id, &(h.transpose() * h), library, baseline, floor)
}

/// Same problem stated through the Gram matrix `G = HᵀH`, minimizing `ωᵀGω`.
/// `G` must be symmetric positive semidefinite.
pub fn cell_weights_gram(
    cell_id: usize,
    gram: &DMatrix<f64>,
    library: &[RuleId],
    baseline: RuleId,
    floor: f64,
) -> Result<CellWeights> {
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument("floor must be positive".into()));
    }
    if gram.ncols() != library.len() || gram.nrows() != library.len() {
        return Err(Error::DimensionMismatch {
            expected: library.len(),
            got: gram.ncols(),
        });
    }
    let b = baseline_index(library, baseline)?;
    let (q, c) = reduced_normal(gram, b);
    let h0sq = gram[(b, b)];
    let n = q.nrows();
    let objective = |x: &DVector<f64>| (x.dot(&(&q * x)) + 2.0 * c.dot(x) + h0sq).max(0.0);

    let mut x = DVector::from_element(n, 1.0f64.max(floor));
    let mut fx = objective(&x);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < QP_MAX_ITER {
        iterations += 1;
        let g = &q * &x + &c;
        let pg_norm = (0..n)
            .map(|i| (x[i] - (x[i] - g[i]).max(floor)).abs())
            .fold(0.0, f64::max);
        let eps = pg_norm.min(1e-6);
        let active: Vec<bool> = (0..n).map(|i| x[i] - floor <= eps && g[i] > 0.0).collect();
        let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
        let mut d = DVector::zeros(n);
        if !free.is_empty() {
            let qff = q.select_rows(&free).select_columns(&free);
            let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
            let step = solve_free(&qff, &gf);
            for (k, &i) in free.iter().enumerate() {
                d[i] = step[k];
            }
        }
        for i in (0..n).filter(|&i| active[i]) {
            d[i] = g[i] / q[(i, i)].max(1e-300);
        }
        // Fall back to the gradient if the Newton direction is not a descent direction.
        let slope: f64 = free.iter().map(|&i| g[i] * d[i]).sum();
        if slope < 0.0 {
            d = g.clone();
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = (&x - alpha * &d).map(|v| v.max(floor));
            let fn_ = objective(&xn);
            let decrease: f64 = (0..n)
                .map(|i| {
                    if active[i] {
                        g[i] * (x[i] - xn[i])
                    } else {
                        alpha * g[i] * d[i]
                    }
                })
                .sum();
            if fx - fn_ >= 1e-4 * decrease || fx - fn_ >= 0.0 && decrease <= 1e-300 {
                accepted = Some((xn, fn_));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            converged = true;
            break;
        };
        let movement = (&xn - &x).amax();
        x = xn;
        fx = fn_;
        if movement < QP_MOVE_TOL {
            converged = true;
            break;
        }
    }
    let omega = expand(&x, b);
    let at_floor = library
        .iter()
        .zip(&omega)
        .filter(|(_, &w)| w <= floor * (1.0 + 1e-9))
        .map(|(&r, _)| r)
        .collect();
    let w = DVector::from_vec(omega.clone());
    let residual_norm = w.dot(&(gram * &w)).max(0.0).sqrt();
    Ok(CellWeights {
        cell_id,
        omega,
        residual_norm,
        at_floor,
        iterations,
        converged,
    })
}

/// Orthonormal coordinates for the affine span of the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBasis {
    pub center: Vec<f64>,
    /// `d` rows by `d_eff` columns, row-major.
    pub vectors: Vec<Vec<f64>>,
    pub d_eff: usize,
}

impl FeatureBasis {
    pub fn from_features(features: &FeatureSet, rows: &[usize]) -> Self {
        let d = features.d;
        let n = rows.len().max(1) as f64;
        let mut center = vec![0.0; d];
        for &i in rows {
            for (c, x) in center.iter_mut().zip(features.row(i)) {
                *c += x / n;
            }
        }
        let d_eff = effective_dimension(features, rows);
        let centered = DMatrix::from_fn(rows.len(), d, |r, k| features.row(rows[r])[k] - center[k]);
        let svd = centered.svd(false, true);
        let vt = svd.v_t.expect("requested right vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let vectors = (0..d)
            .map(|k| order.iter().take(d_eff).map(|&j| vt[(j, k)]).collect())
            .collect();
        FeatureBasis { center, vectors, d_eff }
    }

    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        (0..self.d_eff)
            .map(|j| {
                z.iter()
                    .zip(&self.center)
                    .zip(&self.vectors)
                    .map(|((x, c), v)| (x - c) * v[j])
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Weighting {
    #[default]
    Identity,
    /// Inverse first-stage variance of each cell's log-weight.
    Efficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub ridge_used: bool,
}

fn design(centroids: &[Vec<f64>], basis: &FeatureBasis) -> DMatrix<f64> {
    let k = centroids.len();
    let mut x = DMatrix::zeros(k, 1 + basis.d_eff);
    for (r, c) in centroids.iter().enumerate() {
        x[(r, 0)] = 1.0;
        for (j, v) in basis.project(c).into_iter().enumerate() {
            x[(r, 1 + j)] = v;
        }
    }
    x
}

fn wls(x: &DMatrix<f64>, y: &DVector<f64>, w: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    let sw = |i: usize| w.map_or(1.0, |w| w[i].sqrt());
    let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * sw(i));
    let yw = DVector::from_fn(y.len(), |i, _| y[i] * sw(i));
    let svd = xw.svd(true, true);
    let s1 = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&v| v > 1e-12 * s1).count();
    if rank < x.ncols() {
        return Err(Error::RankDeficientDesign {
            rank,
            needed: x.ncols(),
        });
    }
    svd.solve(&yw, 1e-12 * s1).map_err(|_| Error::SingularVariance)
}

/// Minimum-distance statistic with a diagonal variance: cells are disjoint
/// menu sets, so their first-stage estimates are independent.
pub fn j_test(x: &DMatrix<f64>, y: &DVector<f64>, variance: &DVector<f64>) -> Result<JTest> {
    let k = x.nrows();
    let p = x.ncols();
    if k <= p {
        return Err(Error::TooFewMenus { needed: p + 1, got: k });
    }
    let mut ridge_used = false;
    let inv = DVector::from_iterator(
        k,
        variance.iter().map(|&v| {
            if v > VARIANCE_RIDGE && v.is_finite() {
                1.0 / v
            } else {
                ridge_used = true;
                1.0 / (v.max(0.0) + VARIANCE_RIDGE)
            }
        }),
    );
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularVariance);
    }
    let gamma = wls(x, y, Some(&inv))?;
    let u = y - x * gamma;
    let statistic: f64 = u.iter().zip(inv.iter()).map(|(a, w)| a * a * w).sum();
    let dof = k - p;
    let p_value = ChiSquared::new(dof as f64)
        .map(|d| d.sf(statistic))
        .unwrap_or(f64::NAN)
        .clamp(0.0, 1.0);
    Ok(JTest {
        statistic,
        dof,
        p_value,
        ridge_used,
    })
}

/// Affine index coefficients per rule, `[γ₀, γ₁..γ_{d_eff}]` in basis coordinates.
pub fn second_stage(
    log_weights: &[Vec<f64>],
    x: &DMatrix<f64>,
    weights: Option<&[DVector<f64>]>,
) -> Result<Vec<DVector<f64>>> {
    let k = x.nrows();
    let rank = numerical_rank(x);
    if rank < x.ncols() {
        return Err(Error::RankDeficientDesign {
            rank,
            needed: x.ncols(),
        });
    }
    let f = log_weights.first().map_or(0, |v| v.len());
    (0..f)
        .map(|j| {
            let y = DVector::from_iterator(k, log_weights.iter().map(|v| v[j]));
            wls(x, &y, weights.map(|w| &w[j]))
        })
        .collect()
}

/// Map basis-coordinate coefficients back to gate parameters over the full features.
pub fn gate_from_gamma(
    gammas: &[DVector<f64>],
    basis: &FeatureBasis,
    library: &[RuleId],
    baseline: RuleId,
    feature_names: &[String],
    rescale_factor: f64,
) -> GateParams {
    let d = basis.vectors.len();
    let mut alpha = Vec::with_capacity(library.len());
    let mut beta = Vec::with_capacity(library.len());
    for (j, g) in gammas.iter().enumerate() {
        let b: Vec<f64> = (0..d)
            .map(|k| (0..basis.d_eff).map(|e| basis.vectors[k][e] * g[1 + e]).sum())
            .collect();
        let shift: f64 = b.iter().zip(&basis.center).map(|(x, c)| x * c).sum();
        if library[j] == baseline {
            alpha.push(0.0);
            beta.push(vec![0.0; d]);
        } else {
            alpha.push(g[0] - shift);
            beta.push(b);
        }
    }
    GateParams {
        version: PARAMS_VERSION,
        rules: library.to_vec(),
        alpha,
        beta,
        feature_names: feature_names.to_vec(),
        rescale_factor,
        m_min: DEFAULT_M_MIN,
        baseline: Some(baseline),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepConfig {
    pub library: Vec<RuleId>,
    pub baseline: RuleId,
    pub k: usize,
    pub trim: f64,
    pub floor: f64,
    pub resamples: usize,
    pub weighting: Weighting,
    /// Remove the binomial sampling noise from each cell's Gram matrix when
    /// every menu carries a trial count of at least two.
    pub noise_correction: bool,
    pub seed: u64,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        TwoStepConfig {
            library: RuleId::ALL.to_vec(),
            baseline: RuleId::A1,
            k: 50,
            trim: crate::identification::DEFAULT_TRIM,
            floor: DEFAULT_FLOOR,
            resamples: 100,
            weighting: Weighting::Identity,
            noise_correction: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEstimate {
    pub rule: RuleId,
    pub gamma: Vec<f64>,
    pub gamma_se: Vec<f64>,
    pub w: f64,
    pub w_se: f64,
    pub j: Option<JTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepFit {
    pub library: Vec<RuleId>,
    pub baseline: RuleId,
    pub d_eff: usize,
    pub n_cells: usize,
    pub weighting: Weighting,
    pub noise_corrected: bool,
    pub variance_source: VarianceSource,
    pub resamples: usize,
    pub basis: FeatureBasis,
    pub rules: Vec<RuleEstimate>,
    /// Responsibility weights indexed by [`RuleId::index`].
    pub w: [f64; N_RULES],
    pub params: GateParams,
    pub cells: Vec<CellWeights>,
    pub nonconverged_cells: usize,
}

struct PreparedCell {
    id: usize,
    centroid: Vec<f64>,
    /// One Gram contribution per member menu.
    terms: Vec<DMatrix<f64>>,
    /// Per member menu: the row, its derivative in `p̂`, and `Var(p̂)`.
    noise: Option<Vec<RowNoise>>,
}

/// Sampling perturbation of one restriction row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowNoise {
    pub h: DVector<f64>,
    pub dh: DVector<f64>,
    pub var: f64,
}

/// Where the first-stage variance used by the J-test and efficient weights
/// comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceSource {
    /// Binomial delta method; needs trial counts.
    Delta,
    /// Spread of the menu bootstrap.
    Bootstrap,
}

/// Delta-method variance of `log ω̂` in one cell, in library order. The
/// baseline and floor-bound weights are held fixed and get variance 0.
pub fn delta_log_variance(gram: &DMatrix<f64>, rows: &[RowNoise], omega: &[f64], b: usize, floor: f64) -> Vec<f64> {
    let free: Vec<usize> = (0..omega.len())
        .filter(|&j| j != b && omega[j] > floor * (1.0 + 1e-9))
        .collect();
    let mut out = vec![0.0; omega.len()];
    if free.is_empty() {
        return out;
    }
    let w = DVector::from_column_slice(omega);
    let q = gram.select_rows(&free).select_columns(&free);
    let mut meat = DMatrix::zeros(free.len(), free.len());
    for r in rows {
        let hf = DVector::from_iterator(free.len(), free.iter().map(|&j| r.h[j]));
        let s = r.dh.dot(&w);
        meat += (r.var * s * s) * &hf * hf.transpose();
    }
    let tol = 1e-12 * q.amax().max(f64::MIN_POSITIVE);
    let Ok(qinv) = q.pseudo_inverse(tol) else {
        return out;
    };
    let v = &qinv * meat * &qinv;
    for (k, &j) in free.iter().enumerate() {
        out[j] = v[(k, k)] / (omega[j] * omega[j]);
    }
    out
}

/// Gram contribution of one menu with the sampling noise removed.
///
/// The row `(1 − p̂)κᴸ − p̂κᴿ` is `(1 − p̂)` times the restriction row and is
/// linear in `p̂`, so its outer product overshoots the noiseless one by
/// `Var(p̂)·aaᵀ` in expectation, with `a = κᴸ + κᴿ`. `p̂(1 − p̂)/(n − 1)` is
/// unbiased for `Var(p̂)`.
pub fn noise_corrected_term(
    p: f64,
    n_trials: u32,
    row: &[RuleOutcome; N_RULES],
    library: &[RuleId],
) -> Result<DMatrix<f64>> {
    if n_trials < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 trials, got {n_trials}"
        )));
    }
    let r = scaled_row_noise(p, n_trials, row, library);
    let v = r.var * n_trials as f64 / (n_trials as f64 - 1.0);
    Ok(&r.h * r.h.transpose() - v * &r.dh * r.dh.transpose())
}

/// The row `(1 − p̂)κᴸ − p̂κᴿ`, its derivative `−(κᴸ + κᴿ)` and `p̂(1 − p̂)/n`.
pub fn scaled_row_noise(p: f64, n_trials: u32, row: &[RuleOutcome; N_RULES], library: &[RuleId]) -> RowNoise {
    let p = p.clamp(0.0, 1.0);
    let f = library.len();
    let mut h = DVector::zeros(f);
    let mut dh = DVector::zeros(f);
    for (j, r) in library.iter().enumerate() {
        let o = row[r.index()];
        if o.decisive_left() {
            h[j] = 1.0 - p;
            dh[j] = -1.0;
        } else if o.decisive_right() {
            h[j] = -p;
            dh[j] = -1.0;
        }
    }
    RowNoise {
        h,
        dh,
        var: p * (1.0 - p) / n_trials.max(1) as f64,
    }
}

/// The odds-form restriction row, its derivative in `p̂` and `p̂(1 − p̂)/n`.
pub fn odds_row_noise(p: f64, n_trials: u32, row: &[RuleOutcome; N_RULES], library: &[RuleId], trim: f64) -> RowNoise {
    let h = DVector::from_vec(restriction_from_rate(p, row, library, trim));
    let pc = p.clamp(trim, 1.0 - trim);
    let drdp = 1.0 / ((1.0 - pc) * (1.0 - pc));
    let dh = DVector::from_iterator(
        library.len(),
        library
            .iter()
            .map(|r| if row[r.index()].decisive_right() { -drdp } else { 0.0 }),
    );
    RowNoise {
        h,
        dh,
        var: pc * (1.0 - pc) / n_trials.max(1) as f64,
    }
}

/// Nearest positive semidefinite matrix in Frobenius norm.
pub fn psd_part(g: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (g + g.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| l.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn gram_of(terms: &[DMatrix<f64>], pick: &[usize], f: usize, corrected: bool) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(f, f);
    for &i in pick {
        g += &terms[i];
    }
    if corrected {
        psd_part(&g)
    } else {
        g
    }
}

fn log_omega(c: &CellWeights) -> Vec<f64> {
    c.omega.iter().map(|w| w.ln()).collect()
}

/// Full pipeline: cells, first stage, bootstrap, second stage, J-tests and
/// responsibilities.
pub fn fit_two_step(
    menus: &[Menu],
    matrix: &RuleMatrix,
    features: &FeatureSet,
    config: &TwoStepConfig,
) -> Result<TwoStepFit> {
    if config.resamples < 2 {
        return Err(Error::InvalidArgument("need at least 2 bootstrap resamples".into()));
    }
    let library = &config.library;
    let f = library.len();
    let b = baseline_index(library, config.baseline)?;
    let ident = IdentConfig {
        library: library.clone(),
        k: config.k,
        trim: config.trim,
        seed: config.seed,
    };
    let (_, systems) = cell_systems(menus, matrix, features, &ident)?;
    let min_size = f.saturating_sub(1).max(1);
    let kept: Vec<_> = systems.iter().filter(|s| s.members.len() >= min_size).collect();
    let corrected = config.noise_correction
        && kept
            .iter()
            .flat_map(|s| &s.members)
            .all(|&i| menus[i].n_trials.is_some_and(|n| n >= 2));
    let variance_source = if kept
        .iter()
        .flat_map(|s| &s.members)
        .all(|&i| menus[i].n_trials.is_some_and(|n| n >= 1))
    {
        VarianceSource::Delta
    } else {
        VarianceSource::Bootstrap
    };
    let mut prepared = Vec::new();
    for s in kept {
        let mut terms = Vec::with_capacity(s.members.len());
        let mut noise = Vec::with_capacity(s.members.len());
        for &i in &s.members {
            let p = menus[i]
                .choice_rate
                .ok_or_else(|| Error::MissingChoiceRate(menus[i].id.clone()))?;
            let n = menus[i].n_trials.unwrap_or(0);
            let term = if corrected {
                noise.push(scaled_row_noise(p, n, &matrix.rows[i], library));
                noise_corrected_term(p, n, &matrix.rows[i], library)?
            } else {
                let r = odds_row_noise(p, n, &matrix.rows[i], library, config.trim);
                let t = &r.h * r.h.transpose();
                noise.push(r);
                t
            };
            terms.push(term);
        }
        prepared.push(PreparedCell {
            id: s.id,
            centroid: s.centroid.clone(),
            terms,
            noise: (variance_source == VarianceSource::Delta).then_some(noise),
        });
    }
    let all: Vec<usize> = (0..menus.len()).collect();
    let basis = FeatureBasis::from_features(features, &all);
    let k = prepared.len();
    if k < basis.d_eff + 1 {
        return Err(Error::RankDeficientDesign {
            rank: k,
            needed: basis.d_eff + 1,
        });
    }
    let x = design(&prepared.iter().map(|c| c.centroid.clone()).collect::<Vec<_>>(), &basis);

    let mut delta = Vec::with_capacity(k);
    let mut cells = Vec::with_capacity(k);
    for c in &prepared {
        let all: Vec<usize> = (0..c.terms.len()).collect();
        let g = gram_of(&c.terms, &all, f, corrected);
        let w = cell_weights_gram(c.id, &g, library, config.baseline, config.floor)?;
        if let Some(rows) = &c.noise {
            delta.push(delta_log_variance(&g, rows, &w.omega, b, config.floor));
        }
        cells.push(w);
    }
    let y: Vec<Vec<f64>> = cells.iter().map(log_omega).collect();

    // Stratified menu bootstrap: cells keep their membership.
    let boot: Vec<Vec<Vec<f64>>> = (0..config.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64 + 1);
            let draws: Vec<Vec<usize>> = prepared
                .iter()
                .map(|c| (0..c.terms.len()).map(|_| rng.random_range(0..c.terms.len())).collect())
                .collect();
            prepared
                .iter()
                .zip(&draws)
                .map(|(c, d)| {
                    let g = gram_of(&c.terms, d, f, corrected);
                    cell_weights_gram(c.id, &g, library, config.baseline, config.floor).map(|w| log_omega(&w))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // Per rule, per cell variance of the log-weight.
    let variance: Vec<DVector<f64>> = (0..f)
        .map(|j| {
            DVector::from_iterator(
                k,
                (0..k).map(|c| match variance_source {
                    VarianceSource::Delta => delta[c][j],
                    VarianceSource::Bootstrap => {
                        let v: Vec<f64> = boot.iter().map(|bs| bs[c][j]).collect();
                        let s = robust_sd(&v);
                        s * s
                    }
                }),
            )
        })
        .collect();
    let inv: Vec<DVector<f64>> = variance
        .iter()
        .map(|v| v.map(|s| 1.0 / (s.max(0.0) + VARIANCE_RIDGE)))
        .collect();
    let w_opt = match config.weighting {
        Weighting::Identity => None,
        Weighting::Efficient => Some(inv.as_slice()),
    };

    let gammas = second_stage(&y, &x, w_opt)?;
    let params = gate_from_gamma(
        &gammas,
        &basis,
        library,
        config.baseline,
        &features.names,
        features.rescale_factor,
    );
    let resp = responsibilities(&params, features, matrix);

    let boot_stats: Vec<(Vec<DVector<f64>>, [f64; N_RULES])> = boot
        .par_iter()
        .map(|yb| {
            let g = second_stage(yb, &x, w_opt)?;
            let p = gate_from_gamma(
                &g,
                &basis,
                library,
                config.baseline,
                &features.names,
                features.rescale_factor,
            );
            Ok((g, responsibilities(&p, features, matrix).w))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rules = Vec::with_capacity(f);
    for (j, &rule) in library.iter().enumerate() {
        let gamma: Vec<f64> = if j == b {
            vec![0.0; 1 + basis.d_eff]
        } else {
            gammas[j].iter().copied().collect()
        };
        let gamma_se = (0..1 + basis.d_eff)
            .map(|e| {
                let v: Vec<f64> = boot_stats.iter().map(|(g, _)| g[j][e]).collect();
                if j == b {
                    0.0
                } else {
                    robust_sd(&v)
                }
            })
            .collect();
        let wv: Vec<f64> = boot_stats.iter().map(|(_, w)| w[rule.index()]).collect();
        let j_stat = if j != b && k > basis.d_eff + 1 {
            let yj = DVector::from_iterator(k, y.iter().map(|v| v[j]));
            Some(j_test(&x, &yj, &variance[j])?)
        } else {
            None
        };
        rules.push(RuleEstimate {
            rule,
            gamma,
            gamma_se,
            w: resp.w[rule.index()],
            w_se: robust_sd(&wv),
            j: j_stat,
        });
    }
    let nonconverged_cells = cells.iter().filter(|c| !c.converged).count();
    Ok(TwoStepFit {
        library: library.clone(),
        baseline: config.baseline,
        d_eff: basis.d_eff,
        n_cells: k,
        weighting: config.weighting,
        noise_corrected: corrected,
        variance_source,
        resamples: config.resamples,
        basis,
        rules,
        w: resp.w,
        params,
        cells,
        nonconverged_cells,
    })
}

impl TwoStepFit {
    /// Comparison table: rule, two-step weight, MSE-fit weight, difference, J, p.
    pub fn write_csv<W: Write>(&self, mse_w: Option<&[f64; N_RULES]>, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "rule",
            "w_two_step",
            "w_two_step_se",
            "w_mse",
            "difference",
            "J",
            "dof",
            "p",
        ])?;
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rules {
            let m = mse_w.map(|m| m[r.rule.index()]);
            w.write_record([
                r.rule.name().to_string(),
                r.w.to_string(),
                r.w_se.to_string(),
                fmt(m),
                fmt(m.map(|m| r.w - m)),
                fmt(r.j.as_ref().map(|j| j.statistic)),
                r.j.as_ref().map_or(String::new(), |j| j.dof.to_string()),
                fmt(r.j.as_ref().map(|j| j.p_value)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
