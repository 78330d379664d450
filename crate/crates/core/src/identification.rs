//! Rule-switching identification: restriction rows, feature cells, rank
//! diagnostics and the local Jacobian check.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::gate::GateParams;
use crate::linalg::{affine_rank, rank_from_singular, singular_values};
use crate::lottery::Menu;
use crate::rules::{RuleId, RuleMatrix, RuleOutcome, N_RULES};

pub const DEFAULT_TRIM: f64 = 1e-4;
pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

/// Odds of the trimmed choice rate, `p / (1 - p)`.
pub fn trimmed_odds(p: f64, trim: f64) -> f64 {
    let p = p.clamp(trim, 1.0 - trim);
    p / (1.0 - p)
}

/// `h_f = κ^L_f − r κ^R_f` for each library rule, in library order.
pub fn restriction_row(menu: &Menu, row: &[RuleOutcome; N_RULES], library: &[RuleId], trim: f64) -> Result<Vec<f64>> {
    let p = menu
        .choice_rate
        .ok_or_else(|| Error::MissingChoiceRate(menu.id.clone()))?;
    Ok(restriction_from_rate(p, row, library, trim))
}

pub fn restriction_from_rate(p: f64, row: &[RuleOutcome; N_RULES], library: &[RuleId], trim: f64) -> Vec<f64> {
    let r = trimmed_odds(p, trim);
    library
        .iter()
        .map(|f| {
            let o = row[f.index()];
            if o.decisive_left() {
                1.0
            } else if o.decisive_right() {
                -r
            } else {
                0.0
            }
        })
        .collect()
}

/// A group of menus sharing (approximately) one feature value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Indices into the dataset.
    pub members: Vec<usize>,
    /// Mean raw feature vector of the members.
    pub centroid: Vec<f64>,
    /// Members share one exact feature vector.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub cells: Vec<Cell>,
    pub kmeans_used: bool,
    pub kmeans_k: usize,
    pub kmeans_iterations: usize,
    pub kmeans_converged: bool,
    pub max_iterations: usize,
    pub tolerance: f64,
}

fn centroid_of(features: &FeatureSet, members: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; features.d];
    for &i in members {
        for (a, b) in c.iter_mut().zip(features.row(i)) {
            *a += b;
        }
    }
    let n = members.len().max(1) as f64;
    c.iter_mut().for_each(|a| *a /= n);
    c
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Group `menus` by exact feature equality; groups smaller than `min_size`
/// are pooled and clustered by k-means++ / Lloyd on z-scored features.
pub fn build_cells(features: &FeatureSet, menus: &[usize], k: usize, min_size: usize, seed: u64) -> Result<Clustering> {
    if k < 2 {
        return Err(Error::InvalidArgument("need k >= 2 cells".into()));
    }
    if menus.len() < min_size.max(1) {
        return Err(Error::TooFewMenus {
            needed: min_size.max(1),
            got: menus.len(),
        });
    }
    let mut order: Vec<Vec<u64>> = Vec::new();
    let mut groups: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
    for &i in menus {
        let key: Vec<u64> = features.row(i).iter().map(|v| v.to_bits()).collect();
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }
    let mut cells = Vec::new();
    let mut pooled = Vec::new();
    let mut pooled_distinct = 0;
    for key in &order {
        let g = &groups[key];
        if g.len() >= min_size {
            cells.push(Cell {
                centroid: centroid_of(features, g),
                members: g.clone(),
                exact: true,
            });
        } else {
            pooled.extend_from_slice(g);
            pooled_distinct += 1;
        }
    }
    let mut out = Clustering {
        cells,
        kmeans_used: false,
        kmeans_k: 0,
        kmeans_iterations: 0,
        kmeans_converged: true,
        max_iterations: KMEANS_MAX_ITER,
        tolerance: KMEANS_TOL,
    };
    if pooled.is_empty() {
        return Ok(out);
    }
    let kk = k.min(pooled_distinct);
    let km = kmeans(features, &pooled, kk, seed);
    out.kmeans_used = true;
    out.kmeans_k = kk;
    out.kmeans_iterations = km.iterations;
    out.kmeans_converged = km.converged;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); kk];
    for (&i, &c) in pooled.iter().zip(&km.labels) {
        members[c].push(i);
    }
    for m in members.into_iter().filter(|m| !m.is_empty()) {
        let exact = m.iter().all(|&i| features.row(i) == features.row(m[0]));
        out.cells.push(Cell {
            centroid: centroid_of(features, &m),
            members: m,
            exact,
        });
    }
    Ok(out)
}

struct KMeans {
    labels: Vec<usize>,
    iterations: usize,
    converged: bool,
}

fn kmeans(features: &FeatureSet, idx: &[usize], k: usize, seed: u64) -> KMeans {
    let d = features.d;
    let n = idx.len();
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in idx {
        for (m, x) in mu.iter_mut().zip(features.row(i)) {
            *m += x / n as f64;
        }
    }
    for &i in idx {
        for ((s, x), m) in sd.iter_mut().zip(features.row(i)).zip(&mu) {
            *s += (x - m) * (x - m) / n as f64;
        }
    }
    let pts: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            features
                .row(i)
                .iter()
                .zip(&mu)
                .zip(&sd)
                .map(|((x, m), s)| if *s > 0.0 { (x - m) / s.sqrt() } else { 0.0 })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![pts[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (j, &w) in dist.iter().enumerate() {
                if u < w {
                    pick = j;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(pts[next].clone());
        for (dj, p) in dist.iter_mut().zip(&pts) {
            *dj = dj.min(sq_dist(p, centers.last().expect("nonempty")));
        }
    }

    let mut labels = vec![0usize; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        for (l, p) in labels.iter_mut().zip(&pts) {
            let mut best = (f64::INFINITY, 0);
            for (c, ctr) in centers.iter().enumerate() {
                let dd = sq_dist(p, ctr);
                if dd < best.0 {
                    best = (dd, c);
                }
            }
            *l = best.1;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (l, p) in labels.iter().zip(&pts) {
            counts[*l] += 1;
            for (s, x) in sums[*l].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if shift < KMEANS_TOL {
            converged = true;
            break;
        }
    }
    KMeans {
        labels,
        iterations,
        converged,
    }
}

/// Numerical rank of a stacked restriction matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRank {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// `σ_{F−1} / σ_F` when both exist; infinite when `σ_F` is zero.
    pub gap: Option<f64>,
}

pub fn cell_rank(h: &DMatrix<f64>) -> CellRank {
    let s = singular_values(h);
    let f = h.ncols();
    let gap = if f >= 2 && s.len() >= f {
        let (a, b) = (s[f - 2], s[f - 1]);
        Some(if b > 0.0 { a / b } else { f64::INFINITY })
    } else {
        None
    };
    CellRank {
        rank: rank_from_singular(&s),
        singular_values: s,
        gap,
    }
}

/// One cell with its stacked restriction rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSystem {
    pub id: usize,
    pub members: Vec<usize>,
    pub centroid: Vec<f64>,
    pub exact: bool,
    pub h: DMatrix<f64>,
    pub rank: CellRank,
}

pub fn stack_rows(
    menus: &[Menu],
    matrix: &RuleMatrix,
    members: &[usize],
    library: &[RuleId],
    trim: f64,
) -> Result<DMatrix<f64>> {
    let mut data = Vec::with_capacity(members.len() * library.len());
    for &i in members {
        data.extend(restriction_row(&menus[i], &matrix.rows[i], library, trim)?);
    }
    Ok(DMatrix::from_row_slice(members.len(), library.len(), &data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleCoverage {
    pub rule: RuleId,
    pub n_active: usize,
    pub pr_active: f64,
    pub pr_left_given_active: f64,
    pub pr_right_given_active: f64,
    pub switches: bool,
}

pub fn coverage(matrix: &RuleMatrix, library: &[RuleId]) -> Vec<RuleCoverage> {
    let act = matrix.activity_counts();
    let left = matrix.left_counts();
    let n = matrix.len().max(1) as f64;
    library
        .iter()
        .map(|&r| {
            let a = act[r.index()];
            let l = left[r.index()];
            let (pl, pr) = if a > 0 {
                (l as f64 / a as f64, (a - l) as f64 / a as f64)
            } else {
                (0.0, 0.0)
            };
            RuleCoverage {
                rule: r,
                n_active: a,
                pr_active: a as f64 / n,
                pr_left_given_active: pl,
                pr_right_given_active: pr,
                switches: l > 0 && l < a,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentConfig {
    pub library: Vec<RuleId>,
    pub k: usize,
    pub trim: f64,
    pub seed: u64,
}

impl Default for IdentConfig {
    fn default() -> Self {
        IdentConfig {
            library: RuleId::ALL.to_vec(),
            k: 50,
            trim: DEFAULT_TRIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub id: usize,
    pub size: usize,
    pub exact: bool,
    pub qualifies: bool,
    pub rank: usize,
    pub gap: Option<f64>,
    pub g1_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentReport {
    pub n_menus: usize,
    pub n_two_sided: usize,
    pub two_sided_fraction: f64,
    pub coverage: Vec<RuleCoverage>,
    pub n_rules: usize,
    pub d_eff: usize,
    pub n_cells: usize,
    pub n_qualifying: usize,
    /// Qualifying cells whose rank reaches |F| − 1.
    pub g1_pass_count: usize,
    /// Of those, cells at full column rank |F| (noise lifts the null direction).
    pub full_rank_count: usize,
    pub g1_needed: usize,
    pub g2_rank: usize,
    pub verdict: bool,
    pub kmeans_used: bool,
    pub kmeans_k: usize,
    pub kmeans_iterations: usize,
    pub kmeans_max_iterations: usize,
    pub kmeans_tolerance: f64,
    pub trim: f64,
    pub cells: Vec<CellSummary>,
}

impl IdentReport {
    /// Aligned text tables: coverage by rule, then the rank conditions.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "two-sided menus: {} of {} ({:.1}%)\n",
            self.n_two_sided,
            self.n_menus,
            100.0 * self.two_sided_fraction
        );
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>8} {:>10} {:>10} {:>9}",
            "rule", "N_act", "Pr(act)", "Pr(L|act)", "Pr(R|act)", "switches"
        );
        for c in &self.coverage {
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>8.3} {:>10.3} {:>10.3} {:>9}",
                c.rule.name(),
                c.n_active,
                c.pr_active,
                c.pr_left_given_active,
                c.pr_right_given_active,
                if c.switches { "yes" } else { "" }
            );
        }
        let ok = |b: bool| if b { "pass" } else { "fail" };
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<40} {:>16}", "effective feature dimension d_eff", self.d_eff);
        let _ = writeln!(
            s,
            "{:<40} {:>16} {}",
            format!("(G1) cells with rank(H) >= {}", self.n_rules.saturating_sub(1)),
            format!("{} / {} needed", self.g1_pass_count, self.g1_needed),
            ok(self.g1_pass_count >= self.g1_needed)
        );
        let _ = writeln!(
            s,
            "{:<40} {:>16} {}",
            "(G2) rank([1, centroid])",
            format!("{} / {} needed", self.g2_rank, self.d_eff + 1),
            ok(self.g2_rank == self.d_eff + 1)
        );
        let _ = writeln!(s, "{:<40} {:>16}", "globally identified", ok(self.verdict));
        let _ = writeln!(
            s,
            "\ncells: {} ({} with >= {} menus, {} at full rank); k-means {} (k = {}, {} iterations, cap {}, tol {:e})",
            self.n_cells,
            self.n_qualifying,
            self.n_rules.saturating_sub(1),
            self.full_rank_count,
            if self.kmeans_used { "used" } else { "unused" },
            self.kmeans_k,
            self.kmeans_iterations,
            self.kmeans_max_iterations,
            self.kmeans_tolerance
        );
        s
    }
}

pub fn effective_dimension(features: &FeatureSet, rows: &[usize]) -> usize {
    let r: Vec<&[f64]> = rows.iter().map(|&i| features.row(i)).collect();
    affine_rank(&r).saturating_sub(1)
}

pub fn two_sided_rows(matrix: &RuleMatrix, library: &[RuleId]) -> Vec<usize> {
    (0..matrix.len())
        .filter(|&i| matrix.two_sided_within(i, library))
        .collect()
}

/// Cells over the two-sided menus with their restriction matrices and ranks.
pub fn cell_systems(
    menus: &[Menu],
    matrix: &RuleMatrix,
    features: &FeatureSet,
    config: &IdentConfig,
) -> Result<(Clustering, Vec<CellSystem>)> {
    let library = &config.library;
    let two_sided = two_sided_rows(matrix, library);
    if two_sided.is_empty() {
        return Err(Error::NoTwoSidedMenus);
    }
    let min_size = library.len().saturating_sub(1).max(1);
    let clustering = build_cells(features, &two_sided, config.k, min_size, config.seed)?;
    let mut systems = Vec::with_capacity(clustering.cells.len());
    for (id, cell) in clustering.cells.iter().enumerate() {
        let h = stack_rows(menus, matrix, &cell.members, library, config.trim)?;
        let rank = cell_rank(&h);
        systems.push(CellSystem {
            id,
            members: cell.members.clone(),
            centroid: cell.centroid.clone(),
            exact: cell.exact,
            h,
            rank,
        });
    }
    Ok((clustering, systems))
}

pub fn ident_report(
    menus: &[Menu],
    matrix: &RuleMatrix,
    features: &FeatureSet,
    config: &IdentConfig,
) -> Result<(IdentReport, Vec<CellSystem>)> {
    if menus.len() != matrix.len() || features.len() != matrix.len() {
        return Err(Error::LengthMismatch(format!(
            "{} menus, {} rule rows, {} feature rows",
            menus.len(),
            matrix.len(),
            features.len()
        )));
    }
    if let Some(m) = menus.iter().find(|m| m.choice_rate.is_none()) {
        return Err(Error::MissingChoiceRate(m.id.clone()));
    }
    let library = &config.library;
    let f = library.len();
    let n_two = two_sided_rows(matrix, library).len();
    let all: Vec<usize> = (0..menus.len()).collect();
    let d_eff = effective_dimension(features, &all);
    let (clustering, systems) = cell_systems(menus, matrix, features, config)?;
    let min_size = f.saturating_sub(1).max(1);
    let mut cells = Vec::new();
    let mut passing: Vec<&[f64]> = Vec::new();
    let (mut qualifying, mut full) = (0, 0);
    for s in &systems {
        let q = s.members.len() >= min_size;
        let pass = q && s.rank.rank + 1 >= f;
        qualifying += q as usize;
        if pass {
            passing.push(&s.centroid);
            full += (s.rank.rank == f) as usize;
        }
        cells.push(CellSummary {
            id: s.id,
            size: s.members.len(),
            exact: s.exact,
            qualifies: q,
            rank: s.rank.rank,
            gap: s.rank.gap,
            g1_pass: pass,
        });
    }
    let g2_rank = affine_rank(&passing);
    let g1_needed = d_eff + 1;
    let report = IdentReport {
        n_menus: menus.len(),
        n_two_sided: n_two,
        two_sided_fraction: n_two as f64 / menus.len().max(1) as f64,
        coverage: coverage(matrix, library),
        n_rules: f,
        d_eff,
        n_cells: systems.len(),
        n_qualifying: qualifying,
        g1_pass_count: passing.len(),
        full_rank_count: full,
        g1_needed,
        g2_rank,
        verdict: passing.len() >= g1_needed && g2_rank == d_eff + 1,
        kmeans_used: clustering.kmeans_used,
        kmeans_k: clustering.kmeans_k,
        kmeans_iterations: clustering.kmeans_iterations,
        kmeans_max_iterations: clustering.max_iterations,
        kmeans_tolerance: clustering.tolerance,
        trim: config.trim,
        cells,
    };
    Ok((report, systems))
}

/// Log-odds Jacobian on the two-sided menus with the baseline rule's columns
/// removed. Columns: per free rule, `[∂/∂α_f, ∂/∂β_f]`.
pub fn log_odds_jacobian(
    params: &GateParams,
    features: &FeatureSet,
    matrix: &RuleMatrix,
    baseline: RuleId,
) -> Result<DMatrix<f64>> {
    let library = &params.rules;
    if !library.contains(&baseline) {
        return Err(Error::InvalidArgument(format!("{baseline} not in library")));
    }
    let d = params.n_features();
    let rows = two_sided_rows(matrix, library);
    if rows.is_empty() {
        return Err(Error::NoTwoSidedMenus);
    }
    let free: Vec<usize> = (0..library.len()).filter(|&j| library[j] != baseline).collect();
    let cols = free.len() * (1 + d);
    let mut jac = DMatrix::zeros(rows.len(), cols);
    for (r, &i) in rows.iter().enumerate() {
        let z = features.row(i);
        let q = crate::gate::gate_weights(params, z)?;
        let row = &matrix.rows[i];
        let (mut sl, mut sr) = (0.0, 0.0);
        for (j, f) in library.iter().enumerate() {
            let o = row[f.index()];
            if o.decisive_left() {
                sl += q[j];
            } else if o.decisive_right() {
                sr += q[j];
            }
        }
        for (c, &j) in free.iter().enumerate() {
            let o = row[library[j].index()];
            let v = if o.decisive_left() {
                q[j] / sl
            } else if o.decisive_right() {
                -q[j] / sr
            } else {
                0.0
            };
            jac[(r, c * (1 + d))] = v;
            for k in 0..d {
                jac[(r, c * (1 + d) + 1 + k)] = v * z[k];
            }
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianRank {
    pub rank: usize,
    pub rows: usize,
    /// (|F| − 1)(1 + d).
    pub columns: usize,
    /// (|F| − 1)(1 + d_eff): the most the data can support.
    pub effective_columns: usize,
    pub full_column_rank: bool,
    pub full_effective_rank: bool,
}

pub fn jacobian_local_rank(
    params: &GateParams,
    features: &FeatureSet,
    matrix: &RuleMatrix,
    baseline: RuleId,
) -> Result<JacobianRank> {
    let jac = log_odds_jacobian(params, features, matrix, baseline)?;
    let rank = rank_from_singular(&singular_values(&jac));
    let all: Vec<usize> = (0..matrix.len()).collect();
    let d_eff = effective_dimension(features, &all);
    let free = params.rules.len() - 1;
    let columns = jac.ncols();
    let effective_columns = free * (1 + d_eff);
    Ok(JacobianRank {
        rank,
        rows: jac.nrows(),
        columns,
        effective_columns,
        full_column_rank: rank == columns,
        full_effective_rank: rank >= effective_columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Encoding;
    use crate::gate::{predict, random_params};
    use crate::lottery::Lottery;
    use crate::rules::{build_rule_matrix, Activity};

    #[test]
    fn restriction_examples() {
        let mut row = [RuleOutcome::INACTIVE; N_RULES];
        row[0] = RuleOutcome {
            active: true,
            left: true,
        };
        row[1] = RuleOutcome {
            active: true,
            left: false,
        };
        let lib = [RuleId::MMn, RuleId::MMa, RuleId::MMx];
        assert_eq!(
            restriction_from_rate(0.5, &row, &lib, DEFAULT_TRIM),
            vec![1.0, -1.0, 0.0]
        );
        let h = restriction_from_rate(2.0 / 3.0, &row, &lib, DEFAULT_TRIM);
        assert!((h[1] + 2.0).abs() < 1e-12);
        let m = Menu::unlabeled("x", Lottery::degenerate(1.0), Lottery::degenerate(0.0));
        assert!(matches!(
            restriction_row(&m, &row, &lib, DEFAULT_TRIM),
            Err(Error::MissingChoiceRate(_))
        ));
    }

    #[test]
    fn exact_cells_skip_kmeans() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![(i % 5) as f64, 1.0]).collect();
        let fs = FeatureSet::from_rows(vec!["a".into(), "b".into()], &rows, 1.0).unwrap();
        let idx: Vec<usize> = (0..100).collect();
        let c = build_cells(&fs, &idx, 10, 11, 0).unwrap();
        assert_eq!(c.cells.len(), 5);
        assert!(!c.kmeans_used);
        assert!(c.cells.iter().all(|c| c.exact && c.members.len() == 20));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..100.0)])
            .collect();
        let fs = FeatureSet::from_rows(vec!["a".into(), "b".into()], &rows, 1.0).unwrap();
        let idx: Vec<usize> = (0..300).collect();
        let a = build_cells(&fs, &idx, 8, 11, 42).unwrap();
        let b = build_cells(&fs, &idx, 8, 11, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.kmeans_used);
        assert_eq!(a.cells.iter().map(|c| c.members.len()).sum::<usize>(), 300);
    }

    #[test]
    fn one_always_left_and_one_always_right_rule_fails_g1() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let menus: Vec<Menu> = (0..60)
            .map(|i| {
                let x = (i % 3) as f64;
                Menu::new(
                    format!("m{i}"),
                    Lottery::new(&[x, 10.0], &[0.5, 0.5]).unwrap(),
                    Lottery::degenerate(4.0),
                    Some(rng.random_range(0.1..0.9)),
                    Some(100),
                )
                .unwrap()
            })
            .collect();
        let rm = build_rule_matrix(&menus, Activity::default());
        let fs = FeatureSet::compute(&menus, 10.0, Encoding::Gate);
        let cfg = IdentConfig {
            library: vec![RuleId::A1, RuleId::A2],
            k: 5,
            ..Default::default()
        };
        let (rep, systems) = ident_report(&menus, &rm, &fs, &cfg).unwrap();
        assert_eq!(rep.two_sided_fraction, 1.0);
        // Rows (1, -r) all point the same way once r is fixed per cell only
        // when exact; with varying r the rank is 2, never the 1 = |F| - 1
        // that pins a single ray, so the kernel is empty.
        assert!(systems.iter().all(|s| s.rank.rank == 2));
        assert!(rep.full_rank_count == rep.g1_pass_count);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let menus: Vec<Menu> = (0..30)
            .map(|i| {
                let p: f64 = rng.random_range(0.1..0.9);
                Menu::unlabeled(
                    format!("m{i}"),
                    Lottery::new(&[rng.random_range(-5.0..5.0), 12.0], &[p, 1.0 - p]).unwrap(),
                    Lottery::degenerate(rng.random_range(-3.0..8.0)),
                )
            })
            .collect();
        let rm = build_rule_matrix(&menus, Activity::default());
        let fs = FeatureSet::compute(&menus, 12.0, Encoding::Gate);
        let params = random_params(&mut rng, &RuleId::ALL, &fs.names, 0.5)
            .normalized(RuleId::A1)
            .unwrap();
        let jac = log_odds_jacobian(&params, &fs, &rm, RuleId::A1).unwrap();
        let rows = two_sided_rows(&rm, &params.rules);
        let delta = |p: &GateParams, i: usize| {
            let g = predict(p, fs.row(i), &rm.rows[i]).g;
            (g / (1.0 - g)).ln()
        };
        let h = 1e-6;
        let d = fs.d;
        for (c, j) in (0..12).filter(|&j| RuleId::ALL[j] != RuleId::A1).enumerate().take(4) {
            for k in [0usize, 3] {
                let mut up = params.clone();
                let mut dn = params.clone();
                if k == 0 {
                    up.alpha[j] += h;
                    dn.alpha[j] -= h;
                } else {
                    up.beta[j][k - 1] += h;
                    dn.beta[j][k - 1] -= h;
                }
                for (r, &i) in rows.iter().enumerate() {
                    let fd = (delta(&up, i) - delta(&dn, i)) / (2.0 * h);
                    let an = jac[(r, c * (1 + d) + k)];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{fd} vs {an}");
                }
            }
        }
    }
}
