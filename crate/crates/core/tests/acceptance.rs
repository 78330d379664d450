//! Acceptance battery. Prints one line per criterion and exits non-zero if
//! any criterion that is expected to hold fails.
//!
//! Criteria 9 and 10 read `CHOICES13K_PATH` and `CPC18_PATH`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rulegate::cv::{frozen_features, portability, run_cv, ConstantPredictor, Problem, RuleGating, SplitPlan};
use rulegate::data::{Dataset, Schema};
use rulegate::diagnostics::{ablate, concentration, restrictiveness};
use rulegate::features::{gate_features, rescale_factor, Encoding};
use rulegate::gate::{loss_and_gradient, mse_on, predict, random_params, responsibilities, train, Batch};
use rulegate::identification::{cell_systems, coverage, ident_report, IdentConfig};
use rulegate::lottery::{canonicalize, fsd_compare, Dominance, Lottery, Menu};
use rulegate::rules::{build_rule_matrix, Activity, RuleId, RuleOutcome, N_RULES};
use rulegate::synth::{generate_synthetic, random_lottery, FeatureMode, SynthConfig};
use rulegate::two_step::{cell_weights, fit_two_step, TwoStepConfig, DEFAULT_FLOOR};
use rulegate::{FeatureSet, GateParams, TrainConfig, GATE_FEATURE_NAMES};

/// Criteria allowed to fail; each one is explained in the project notes.
const KNOWN_SHORTFALLS: &[u32] = &[];

enum Verdict {
    Pass(String),
    Fail(String),
    Skipped(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn names() -> Vec<String> {
    GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------- oracles

/// `P(X <= t)` by direct summation.
fn cdf(l: &Lottery, t: f64) -> f64 {
    l.outcomes()
        .iter()
        .zip(l.probs())
        .filter(|(x, _)| **x <= t)
        .map(|(_, p)| p)
        .sum()
}

/// Dominance by comparing CDFs at every point of the joint support.
fn brute_fsd(a: &Lottery, b: &Lottery) -> Dominance {
    const TOL: f64 = 1e-12;
    let mut grid: Vec<f64> = a.outcomes().iter().chain(b.outcomes()).copied().collect();
    grid.sort_by(f64::total_cmp);
    let (mut a_le, mut b_le, mut a_lt, mut b_lt) = (true, true, false, false);
    for &t in &grid {
        let (fa, fb) = (cdf(a, t), cdf(b, t));
        if fa > fb + TOL {
            a_le = false;
            b_lt = true;
        }
        if fb > fa + TOL {
            b_le = false;
            a_lt = true;
        }
    }
    match (a_le && a_lt, b_le && b_lt) {
        (true, _) => Dominance::LeftStrict,
        (_, true) => Dominance::RightStrict,
        _ if a_le && b_le => Dominance::Equivalent,
        _ => Dominance::Incomparable,
    }
}

fn grid_lottery(rng: &mut ChaCha8Rng) -> Lottery {
    let k = rng.random_range(1..=5);
    let xs: Vec<f64> = (0..k).map(|_| rng.random_range(-4..=6) as f64).collect();
    let ws: Vec<f64> = (0..k).map(|_| rng.random_range(1..=4) as f64).collect();
    let total: f64 = ws.iter().sum();
    let ps: Vec<f64> = ws.iter().map(|w| w / total).collect();
    canonicalize(&xs, &ps).unwrap()
}

/// Shift every payoff of `l` up by a non-negative amount, so the result weakly dominates.
fn shifted_up(rng: &mut ChaCha8Rng, l: &Lottery) -> Lottery {
    let xs: Vec<f64> = l
        .outcomes()
        .iter()
        .map(|x| x + rng.random_range(0..=2) as f64)
        .collect();
    canonicalize(&xs, l.probs()).unwrap()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut disagreements = 0;
    let mut strict = 0;
    for i in 0..10_000 {
        let a = grid_lottery(&mut rng);
        let b = if i % 2 == 0 {
            grid_lottery(&mut rng)
        } else {
            shifted_up(&mut rng, &a)
        };
        let (a, b) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        let got = fsd_compare(&a, &b, 0.0);
        strict += got.is_strict() as usize;
        if got != brute_fsd(&a, &b) {
            disagreements += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        disagreements == 0 && elapsed < Duration::from_secs(10),
        format!("{disagreements} disagreements on 10000 pairs ({strict} strict), {elapsed:.2?}"),
    )
}

// Reference rule evaluation, built from the rule definitions alone.
mod reference {
    use super::*;

    pub fn contr(x: f64, y: f64) -> f64 {
        (x - y).abs() / (x.abs() + y.abs() + 1.0)
    }

    fn point(x: f64) -> Lottery {
        Lottery::degenerate(x)
    }

    fn outcome(a: &Lottery, b: &Lottery) -> RuleOutcome {
        match brute_fsd(a, b) {
            Dominance::LeftStrict => RuleOutcome {
                active: true,
                left: true,
            },
            Dominance::RightStrict => RuleOutcome {
                active: true,
                left: false,
            },
            _ => RuleOutcome {
                active: false,
                left: false,
            },
        }
    }

    fn sure(x: f64, y: f64) -> RuleOutcome {
        outcome(&point(x), &point(y))
    }

    fn top_mode(l: &Lottery) -> f64 {
        let best = l.probs().iter().cloned().fold(0.0, f64::max);
        let mut m = f64::NEG_INFINITY;
        for (x, p) in l.outcomes().iter().zip(l.probs()) {
            if *p >= best - 1e-12 && *x > m {
                m = *x;
            }
        }
        m
    }

    /// Smallest value whose cumulative mass reaches one half.
    fn lower_wmed(pairs: &[(f64, f64)]) -> f64 {
        let mut v = pairs.to_vec();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = v.iter().map(|p| p.1).sum();
        let mut values: Vec<f64> = v.iter().map(|p| p.0).collect();
        values.dedup();
        for x in values {
            let below: f64 = v.iter().filter(|p| p.0 <= x).map(|p| p.1).sum();
            if below >= 0.5 * total - 1e-12 * total {
                return x;
            }
        }
        unreachable!()
    }

    fn downside(l: &Lottery) -> Vec<f64> {
        let m = top_mode(l);
        let mut s: Vec<f64> = l.outcomes().iter().filter(|z| **z < m).map(|z| contr(m, *z)).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    fn dis(l: &Lottery) -> f64 {
        downside(l).first().copied().unwrap_or(0.0)
    }

    fn dis_med(l: &Lottery) -> f64 {
        let s = downside(l);
        if s.len() >= 2 {
            s[1]
        } else {
            dis(l)
        }
    }

    pub fn evaluate(rule: RuleId, a: &Lottery, b: &Lottery) -> RuleOutcome {
        let lo = |l: &Lottery| l.outcomes()[0];
        let hi = |l: &Lottery| *l.outcomes().last().unwrap();
        let pairs = [(lo(a), lo(b)), (lo(a), hi(b)), (hi(a), lo(b)), (hi(a), hi(b))];
        // Descending salience; equal scores keep enumeration order.
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&i, &j| contr(pairs[j].0, pairs[j].1).total_cmp(&contr(pairs[i].0, pairs[i].1)));
        let score = |k: usize| contr(pairs[k].0, pairs[k].1);
        let mut states = Vec::new();
        for (x, p) in a.outcomes().iter().zip(a.probs()) {
            for (y, q) in b.outcomes().iter().zip(b.probs()) {
                states.push((*x, *y, p * q));
            }
        }
        let regret_l: Vec<(f64, f64)> = states.iter().map(|s| ((s.1 - s.0).max(0.0), s.2)).collect();
        let regret_r: Vec<(f64, f64)> = states.iter().map(|s| ((s.0 - s.1).max(0.0), s.2)).collect();
        let negated = |r: &[(f64, f64)]| {
            let xs: Vec<f64> = r.iter().map(|p| -p.0).collect();
            let ps: Vec<f64> = r.iter().map(|p| p.1).collect();
            canonicalize(&xs, &ps).unwrap()
        };
        match rule {
            RuleId::MMn => sure(lo(a), lo(b)),
            RuleId::MMx => sure(hi(a), hi(b)),
            RuleId::MMa => sure(0.5 * (lo(a) + hi(a)), 0.5 * (lo(b) + hi(b))),
            RuleId::MAP => sure(top_mode(a), top_mode(b)),
            RuleId::SAL => {
                let k = order[0];
                sure(pairs[k].0, pairs[k].1)
            }
            RuleId::SAL2 => {
                if score(order[0]) == score(order[1]) {
                    RuleOutcome {
                        active: false,
                        left: false,
                    }
                } else {
                    let k = order[1];
                    sure(pairs[k].0, pairs[k].1)
                }
            }
            RuleId::REG => outcome(&negated(&regret_l), &negated(&regret_r)),
            RuleId::REGmed => sure(-lower_wmed(&regret_l), -lower_wmed(&regret_r)),
            RuleId::DIS => sure(-dis(a), -dis(b)),
            RuleId::DISmed => sure(-dis_med(a), -dis_med(b)),
            RuleId::A1 => RuleOutcome {
                active: true,
                left: true,
            },
            RuleId::A2 => RuleOutcome {
                active: true,
                left: false,
            },
        }
    }
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut menus = Vec::with_capacity(200);
    for i in 0..200 {
        let (a, b) = match i % 4 {
            // Small integer grids make ties in modes, medians and salience common.
            0 => (grid_lottery(&mut rng), grid_lottery(&mut rng)),
            1 => (
                random_lottery(&mut rng, 4, -20, 50),
                random_lottery(&mut rng, 4, -20, 50),
            ),
            2 => (
                Lottery::degenerate(rng.random_range(-3..=3) as f64),
                grid_lottery(&mut rng),
            ),
            _ => {
                let a = grid_lottery(&mut rng);
                let b = shifted_up(&mut rng, &a);
                (a, b)
            }
        };
        menus.push(Menu::unlabeled(format!("m{i}"), a, b));
    }
    let matrix = build_rule_matrix(&menus, Activity::Fsd { epsilon: 0.0 });
    let mut mismatches = 0;
    for (i, m) in menus.iter().enumerate() {
        for r in RuleId::ALL {
            let want = reference::evaluate(r, &m.left, &m.right);
            let got = matrix.get(i, r);
            if want.active != got.active || (want.active && want.left != got.left) {
                mismatches += 1;
            }
        }
    }
    let active: usize = matrix.activity_counts().iter().sum();
    check(
        mismatches == 0,
        format!("{mismatches} mismatches over 200 menus x 12 rules ({active} active cells)"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 1000 {
        let menu = Menu::unlabeled(
            "m",
            random_lottery(&mut rng, 4, -20, 50),
            random_lottery(&mut rng, 4, -20, 50),
        );
        let factor = rescale_factor(std::slice::from_ref(&menu)).unwrap();
        let z = gate_features(&menu, factor);
        let params = random_params(&mut rng, &RuleId::ALL, &names(), 1.5);
        let matrix = build_rule_matrix(std::slice::from_ref(&menu), Activity::default());
        let row = &matrix.rows[0];
        let p = predict(&params, &z, row);
        if p.guard_hit {
            continue;
        }
        // Independent softmax and conditional weights.
        let eta: Vec<f64> = (0..N_RULES)
            .map(|j| params.alpha[j] + params.beta[j].iter().zip(&z).map(|(b, x)| b * x).sum::<f64>())
            .collect();
        let top = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = eta.iter().map(|v| (v - top).exp()).collect();
        let active_mass: f64 = (0..N_RULES).filter(|&j| row[j].active).map(|j| e[j]).sum();
        let mixture: f64 = (0..N_RULES)
            .filter(|&j| row[j].active && row[j].left)
            .map(|j| e[j] / active_mass)
            .sum();
        worst = worst.max((p.g - mixture).abs());
        checked += 1;
    }
    check(
        worst < 1e-9,
        format!("max |g - sum q~ L| = {worst:.2e} over 1000 pairs"),
    )
}

fn criterion_4() -> Verdict {
    let mut worst: f64 = 0.0;
    for problem in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + problem);
        let truth = random_params(&mut rng, &RuleId::ALL, &names(), 0.5);
        let s = generate_synthetic(
            &truth,
            &SynthConfig {
                n_cells: 6,
                menus_per_cell: 10,
                n_trials: Some(50),
                feature_mode: FeatureMode::Computed,
                seed: problem,
                ..Default::default()
            },
        )
        .unwrap();
        let targets = s.dataset.targets().unwrap();
        let rows: Vec<usize> = (0..targets.len()).collect();
        let batch = Batch {
            features: &s.features,
            matrix: &s.matrix,
            rows: &rows,
            targets: &targets,
        };
        let params = random_params(&mut rng, &RuleId::ALL, &names(), 0.3);
        let (_, grad) = loss_and_gradient(&params, &batch);
        let theta = params.to_flat();
        let coords = rand::seq::index::sample(&mut rng, theta.len(), 20);
        let h = 1e-5;
        let mut p = params.clone();
        for k in coords {
            // Finite differences through the prediction path, not the training loss.
            let mut t = theta.clone();
            t[k] += h;
            p.set_flat(&t);
            let up = mse_on(&p, &batch);
            t[k] = theta[k] - h;
            p.set_flat(&t);
            let down = mse_on(&p, &batch);
            let numeric = (up - down) / (2.0 * h);
            let denom = grad[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((grad[k] - numeric).abs() / denom);
        }
    }
    check(
        worst < 1e-5,
        format!("max relative error {worst:.2e} on 20 coords x 5 problems"),
    )
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let truth = random_params(&mut rng, &RuleId::ALL, &names(), 0.5);
    let s = generate_synthetic(
        &truth,
        &SynthConfig {
            n_cells: 13,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let config = IdentConfig::default();
    let (report, _) = ident_report(&s.dataset.menus, &s.matrix, &s.features, &config).unwrap();
    let (_, systems) = cell_systems(&s.dataset.menus, &s.matrix, &s.features, &config).unwrap();
    let b = RuleId::A1.index();
    let mut worst: f64 = 0.0;
    let mut exact_cells = 0;
    for sys in &systems {
        exact_cells += sys.exact as usize;
        let fit = cell_weights(sys.id, &sys.h, &RuleId::ALL, RuleId::A1, DEFAULT_FLOOR).unwrap();
        let eta: Vec<f64> = (0..N_RULES)
            .map(|j| truth.alpha[j] + truth.beta[j].iter().zip(&sys.centroid).map(|(x, z)| x * z).sum::<f64>())
            .collect();
        for j in 0..N_RULES {
            let want = (eta[j] - eta[b]).exp();
            worst = worst.max((fit.omega[j] - want).abs());
        }
    }
    let elapsed = start.elapsed();
    check(
        report.verdict && systems.len() == 13 && exact_cells == 13 && worst < 1e-6 && elapsed < Duration::from_secs(60),
        format!(
            "verdict {}, {} exact cells, max |omega - truth| {worst:.2e}, {elapsed:.2?}",
            report.verdict, exact_cells
        ),
    )
}

// ------------------------------------------------------- Monte Carlo design

const MC_REPS: usize = 200;
const MC_TRIALS: [u32; 3] = [100, 1_000, 10_000];

struct McRun {
    median_error: f64,
    coverage: f64,
    p_values: Vec<f64>,
    /// Share of replications whose J-test rejects at 5% for at least half the rules.
    rejection: f64,
}

fn mc_design(curvature: f64) -> (GateParams, rulegate::synth::Synthetic) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth = random_params(&mut rng, &RuleId::ALL, &names(), 0.5)
        .normalized(RuleId::A1)
        .unwrap();
    let curvature = if curvature == 0.0 {
        Vec::new()
    } else {
        RuleId::ALL
            .iter()
            .map(|r| match r {
                RuleId::A1 => 0.0,
                r if r.index() % 2 == 0 => curvature,
                _ => -curvature,
            })
            .collect()
    };
    let s = generate_synthetic(
        &truth,
        &SynthConfig {
            menus_per_cell: 100,
            feature_mode: FeatureMode::Oracle { varying: 2 },
            curvature,
            ..Default::default()
        },
    )
    .unwrap();
    (truth, s)
}

fn mc_run(truth: &GateParams, s: &rulegate::synth::Synthetic, n: u32, seed_base: u64) -> McRun {
    let mut errors = Vec::with_capacity(MC_REPS);
    let (mut covered, mut total) = (0usize, 0usize);
    let mut p_values = Vec::new();
    let mut rejecting = 0usize;
    for rep in 0..MC_REPS {
        let ds = s.redraw(Some(n), seed_base + rep as u64);
        let fit = fit_two_step(
            &ds.menus,
            &s.matrix,
            &s.features,
            &TwoStepConfig {
                seed: rep as u64,
                ..Default::default()
            },
        )
        .unwrap();
        let mut sq = 0.0;
        let mut rep_p = Vec::new();
        for (j, r) in fit.rules.iter().enumerate() {
            if r.rule == RuleId::A1 {
                continue;
            }
            let beta = &truth.beta[j];
            // True coefficients in the fitted centred basis.
            let mut want = vec![truth.alpha[j] + beta.iter().zip(&fit.basis.center).map(|(b, c)| b * c).sum::<f64>()];
            for e in 0..fit.d_eff {
                want.push((0..beta.len()).map(|k| fit.basis.vectors[k][e] * beta[k]).sum());
            }
            for (e, w) in want.iter().enumerate() {
                let d = r.gamma[e] - w;
                sq += d * d;
                total += 1;
                covered += (d.abs() <= 1.96 * r.gamma_se[e]) as usize;
            }
            if let Some(j) = &r.j {
                rep_p.push(j.p_value);
            }
        }
        errors.push(sq.sqrt());
        let rejects = rep_p.iter().filter(|&&p| p < 0.05).count();
        rejecting += (2 * rejects >= rep_p.len() && !rep_p.is_empty()) as usize;
        p_values.extend(rep_p);
    }
    errors.sort_by(f64::total_cmp);
    McRun {
        median_error: 0.5 * (errors[MC_REPS / 2 - 1] + errors[MC_REPS / 2]),
        coverage: covered as f64 / total as f64,
        p_values,
        rejection: rejecting as f64 / MC_REPS as f64,
    }
}

fn ks_uniform(p: &[f64]) -> f64 {
    let mut v = p.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| ((i as f64 + 1.0) / m - x).max(x - i as f64 / m))
        .fold(0.0, f64::max)
}

fn criteria_6_7() -> (Verdict, Verdict) {
    let (truth, s) = mc_design(0.0);
    let runs: Vec<McRun> = MC_TRIALS
        .iter()
        .enumerate()
        .map(|(i, &n)| mc_run(&truth, &s, n, 10_000 * (i as u64 + 1)))
        .collect();
    let medians: Vec<f64> = runs.iter().map(|r| r.median_error).collect();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let cov = runs[2].coverage;
    let six = check(
        decreasing && (0.90..=0.99).contains(&cov),
        format!(
            "median error {:.4} / {:.4} / {:.4} at n = 1e2/1e3/1e4, coverage {cov:.3} at 1e4",
            medians[0], medians[1], medians[2]
        ),
    );

    let null_p = &runs[2].p_values;
    let ks = ks_uniform(null_p);
    let size = null_p.iter().filter(|&&p| p < 0.05).count() as f64 / null_p.len() as f64;
    let (truth_q, s_q) = mc_design(1.0);
    let alt = mc_run(&truth_q, &s_q, 10_000, 90_000);
    let power = alt.p_values.iter().filter(|&&p| p < 0.05).count() as f64 / alt.p_values.len() as f64;
    let seven = check(
        ks < 0.1 && power > 0.8,
        format!(
            "null KS {ks:.3} (size {size:.3}, {} p-values); quadratic rejection {power:.3} (replication-level {:.3})",
            null_p.len(),
            alt.rejection
        ),
    );
    (six, seven)
}

/// The ratio depends on menus per parameter, so the corpus matches the size of
/// the real choice data (about 10k menus against 156 gate parameters).
fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let truth = random_params(&mut rng, &RuleId::ALL, &names(), 0.5);
    let s = generate_synthetic(
        &truth,
        &SynthConfig {
            n_cells: 50,
            menus_per_cell: 200,
            n_trials: Some(100),
            feature_mode: FeatureMode::Computed,
            seed: 8,
            ..Default::default()
        },
    )
    .unwrap();
    let targets = s.dataset.targets().unwrap();
    let problem = Problem::new(&s.features, &s.matrix, &targets, None).unwrap();
    let plan = SplitPlan {
        n_splits: 5,
        seed: 8,
        ..Default::default()
    };
    let gating = RuleGating::new(&RuleId::ALL, TrainConfig::default());
    let constant = restrictiveness(&problem, &ConstantPredictor, &plan, 2, 0.01, 8).unwrap();
    let model = restrictiveness(&problem, &gating, &plan, 2, 0.01, 8).unwrap();
    check(
        constant.ratio == 1.0 && (0.85..=1.05).contains(&model.ratio),
        format!(
            "constant {:.6}, rule-gating {:.4} on {} menus",
            constant.ratio,
            model.ratio,
            targets.len()
        ),
    )
}

// ------------------------------------------------------------ real data

const EXPECTED_COVERAGE: [(RuleId, usize, f64); N_RULES] = [
    (RuleId::MMn, 9584, 0.294),
    (RuleId::MMa, 9668, 0.580),
    (RuleId::MMx, 9688, 0.739),
    (RuleId::MAP, 9512, 0.410),
    (RuleId::SAL, 9831, 0.485),
    (RuleId::SAL2, 4057, 0.509),
    (RuleId::REG, 2957, 0.543),
    (RuleId::REGmed, 8661, 0.446),
    (RuleId::DIS, 4773, 0.322),
    (RuleId::DISmed, 4773, 0.336),
    (RuleId::A1, 9831, 1.000),
    (RuleId::A2, 9831, 0.000),
];

fn data_path(var: &str) -> Option<std::path::PathBuf> {
    std::env::var_os(var)
        .map(Into::into)
        .filter(|p: &std::path::PathBuf| p.exists())
}

fn criterion_9() -> Verdict {
    let Some(path) = data_path("CHOICES13K_PATH") else {
        return Verdict::Skipped("data absent".into());
    };
    let ds = match Dataset::load(&path, Schema::Choices13k) {
        Ok(d) => d,
        Err(e) => return Verdict::Fail(format!("load failed: {e}")),
    };
    let features = FeatureSet::compute(&ds.menus, ds.rescale_factor, Encoding::Gate);
    let matrix = build_rule_matrix(&ds.menus, Activity::default());
    let targets = ds.targets().unwrap();
    let lib = RuleId::ALL.to_vec();
    let (report, _) = ident_report(&ds.menus, &matrix, &features, &IdentConfig::default()).unwrap();
    let cov = coverage(&matrix, &lib);
    let coverage_ok = EXPECTED_COVERAGE
        .iter()
        .zip(&cov)
        .all(|((r, n, left), c)| c.rule == *r && c.n_active == *n && (c.pr_left_given_active - left).abs() <= 0.0005);
    let problem = Problem::new(&features, &matrix, &targets, None).unwrap();
    let gating = RuleGating::new(&lib, TrainConfig::default());
    let plan = SplitPlan::default();
    let lr_grid = TrainConfig::default().lr_grid;
    let cv = run_cv(&problem, &gating, &plan, &lr_grid).unwrap().record;
    let rows: Vec<usize> = (0..targets.len()).collect();
    let full = train(
        &lib,
        &Batch {
            features: &features,
            matrix: &matrix,
            rows: &rows,
            targets: &targets,
        },
        &TrainConfig::default(),
    )
    .unwrap();
    let hhi = concentration(&responsibilities(&full.params, &features, &matrix).w)
        .unwrap()
        .hhi;
    let drop: Vec<RuleId> = lib.iter().copied().filter(|r| !r.is_attention()).collect();
    let abl = ablate(&problem, &gating, &drop, &plan, &lr_grid).unwrap();
    let phi = |r: RuleId| abl.entries.iter().find(|e| e.rule == r).unwrap().phi;
    let mut ranked: Vec<(RuleId, f64)> = abl.entries.iter().map(|e| (e.rule, e.phi)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top2: Vec<RuleId> = ranked.iter().take(2).map(|e| e.0).collect();
    let signs_ok = top2.contains(&RuleId::SAL) && top2.contains(&RuleId::SAL2) && phi(RuleId::MMa) <= 0.0;
    let ok = report.two_sided_fraction == 1.0
        && coverage_ok
        && report.d_eff == 11
        && report.g2_rank == 12
        && (cv.mean_test_mse - 0.01168).abs() <= 0.0015
        && cv.selected_lr == 0.01
        && (hhi - 0.173).abs() <= 0.03
        && signs_ok;
    check(
        ok,
        format!(
            "D1 {:.3}, coverage {}, d_eff {}, G2 {}, CV MSE {:.5} at lr {}, HHI {hhi:.3}, ablation top {:?}, phi(MMa) {:.2e}",
            report.two_sided_fraction,
            if coverage_ok { "match" } else { "differs" },
            report.d_eff,
            report.g2_rank,
            cv.mean_test_mse,
            cv.selected_lr,
            top2,
            phi(RuleId::MMa)
        ),
    )
}

fn criterion_10() -> Verdict {
    let (Some(c13), Some(cpc)) = (data_path("CHOICES13K_PATH"), data_path("CPC18_PATH")) else {
        return Verdict::Skipped("data absent".into());
    };
    let run = || -> rulegate::Result<rulegate::cv::PortabilityReport> {
        let source = Dataset::load(&c13, Schema::Choices13k)?;
        let features = FeatureSet::compute(&source.menus, source.rescale_factor, Encoding::Gate);
        let matrix = build_rule_matrix(&source.menus, Activity::default());
        let targets = source.targets()?;
        let rows: Vec<usize> = (0..targets.len()).collect();
        let fit = train(
            &RuleId::ALL,
            &Batch {
                features: &features,
                matrix: &matrix,
                rows: &rows,
                targets: &targets,
            },
            &TrainConfig::default(),
        )?;
        let target = Dataset::load(&cpc, Schema::Cpc18)?;
        let frozen = frozen_features(&fit.params, &target);
        portability(&fit.params, &target, &frozen, Activity::default())
    };
    match run() {
        Err(e) => Verdict::Fail(format!("{e}")),
        Ok(r) => check(
            (r.mse_menu - 0.0148).abs() <= 0.002
                && (r.brier_trial - 0.1952).abs() <= 0.01
                && (r.logloss_trial - 0.5705).abs() <= 0.01,
            format!(
                "MSE_menu {:.4}, Brier {:.4}, log-loss {:.4}",
                r.mse_menu, r.brier_trial, r.logloss_trial
            ),
        ),
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let (six, seven) = criteria_6_7();
    let results = vec![
        (1, "FSD oracle equivalence", criterion_1()),
        (2, "rule-indicator reference", criterion_2()),
        (3, "mixture identity", criterion_3()),
        (4, "gradient check", criterion_4()),
        (5, "identification recovery", criterion_5()),
        (6, "two-step consistency", six),
        (7, "J-test calibration", seven),
        (8, "restrictiveness sanity", criterion_8()),
        (9, "dataset reproduction", criterion_9()),
        (10, "portability", criterion_10()),
    ];
    let mut unexpected = 0;
    for (id, name, verdict) in &results {
        match verdict {
            Verdict::Pass(d) => println!("criterion {id:>2} {name}: pass ({d})"),
            Verdict::Skipped(d) => println!("criterion {id:>2} {name}: skipped: {d}"),
            Verdict::Fail(d) => {
                let known = KNOWN_SHORTFALLS.contains(id);
                println!(
                    "criterion {id:>2} {name}: FAIL ({d}){}",
                    if known { " [known]" } else { "" }
                );
                unexpected += !known as usize;
            }
        }
    }
    println!("acceptance finished in {:.1?}", started.elapsed());
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
