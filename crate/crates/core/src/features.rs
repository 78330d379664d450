//! Menu encodings: interpretable gate features, the raw padded encoding,
//! payoff rescaling and the complexity covariates.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lottery::{mode, Lottery, Menu};

pub const N_GATE_FEATURES: usize = 12;
/// Support slots per lottery in the raw encoding.
pub const RAW_SLOTS: usize = 10;
pub const RAW_DIM: usize = 4 * RAW_SLOTS;

pub const GATE_FEATURE_NAMES: [&str; N_GATE_FEATURES] = [
    "ev_gap",
    "max_gap",
    "min_gap",
    "var_gap",
    "mode_gap",
    "skew_gap",
    "ev_left",
    "ev_right",
    "sd_left",
    "sd_right",
    "max_abs_payoff",
    "support_gap",
];

/// Largest absolute payoff over all menus, or 1 when every payoff is zero.
pub fn rescale_factor(menus: &[Menu]) -> Result<f64> {
    if menus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m = menus.iter().map(Menu::max_abs_payoff).fold(0.0, f64::max);
    Ok(if m > 0.0 { m } else { 1.0 })
}

pub fn gate_features(menu: &Menu, factor: f64) -> [f64; N_GATE_FEATURES] {
    let a = menu.left.scaled(1.0 / factor);
    let b = menu.right.scaled(1.0 / factor);
    let (ea, eb) = (a.expected_value(), b.expected_value());
    [
        ea - eb,
        a.max() - b.max(),
        a.min() - b.min(),
        a.variance() - b.variance(),
        mode(&a) - mode(&b),
        a.skewness() - b.skewness(),
        ea,
        eb,
        a.std_dev(),
        b.std_dev(),
        a.max_abs().max(b.max_abs()),
        a.support_size() as f64 - b.support_size() as f64,
    ]
}

fn encode_lottery(l: &Lottery, out: &mut [f64]) {
    for (k, (&x, &p)) in l.outcomes().iter().zip(l.probs()).take(RAW_SLOTS).enumerate() {
        out[k] = x;
        out[RAW_SLOTS + k] = p;
    }
}

/// Left outcomes, left probs, right outcomes, right probs; each block zero
/// padded to [`RAW_SLOTS`]. Larger supports keep their smallest outcomes.
pub fn raw_encoding(menu: &Menu, factor: f64) -> [f64; RAW_DIM] {
    let mut v = [0.0; RAW_DIM];
    encode_lottery(&menu.left.scaled(1.0 / factor), &mut v[..2 * RAW_SLOTS]);
    encode_lottery(&menu.right.scaled(1.0 / factor), &mut v[2 * RAW_SLOTS..]);
    v
}

/// Complexity covariates on raw payoffs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MenuCovariates {
    pub tc: f64,
    pub risk_asym: f64,
}

/// Integral of |F_a − F_b| over the real line; exact because both CDFs are steps.
pub fn cdf_distance(a: &Lottery, b: &Lottery) -> f64 {
    let mut grid: Vec<f64> = a.outcomes().iter().chain(b.outcomes()).copied().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let (mut fa, mut fb) = (0.0, 0.0);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    for w in grid.windows(2) {
        while i < a.support_size() && a.outcomes()[i] <= w[0] {
            fa += a.probs()[i];
            i += 1;
        }
        while j < b.support_size() && b.outcomes()[j] <= w[0] {
            fb += b.probs()[j];
            j += 1;
        }
        total += (fa - fb).abs() * (w[1] - w[0]);
    }
    total
}

pub fn menu_covariates(menu: &Menu) -> MenuCovariates {
    let delta = cdf_distance(&menu.left, &menu.right);
    let ev_gap = (menu.left.expected_value() - menu.right.expected_value()).abs();
    MenuCovariates {
        tc: (delta - ev_gap).max(0.0).ln_1p(),
        risk_asym: (menu.left.std_dev() - menu.right.std_dev()).abs(),
    }
}

/// Quantile bin assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    /// Per item bin index, compacted to `0..n_bins`.
    pub bins: Vec<usize>,
    pub n_bins: usize,
    /// Set when fewer than `k` bins could be formed.
    pub degenerate: bool,
}

/// Quantile bins by rank; tied values share the bin of their lowest rank.
pub fn decile_bins(values: &[f64], k: usize) -> Result<Bins> {
    if k < 2 {
        return Err(Error::InvalidArgument("need at least 2 bins".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("binning values"));
    }
    let n = values.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| values[x].total_cmp(&values[y]));
    let mut raw = vec![0usize; n];
    let mut first_rank = 0;
    for (r, &i) in order.iter().enumerate() {
        if r > 0 && values[i] != values[order[r - 1]] {
            first_rank = r;
        }
        raw[i] = first_rank * k / n;
    }
    let mut used: Vec<usize> = raw.clone();
    used.sort_unstable();
    used.dedup();
    let bins = raw
        .iter()
        .map(|b| used.binary_search(b).expect("bin present"))
        .collect();
    Ok(Bins {
        bins,
        n_bins: used.len(),
        degenerate: used.len() < k,
    })
}

/// Gate inputs for a whole dataset, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub names: Vec<String>,
    pub rescale_factor: f64,
    pub d: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Encoding {
    #[default]
    Gate,
    Raw,
}

impl FeatureSet {
    pub fn compute(menus: &[Menu], factor: f64, encoding: Encoding) -> Self {
        let (names, d): (Vec<String>, usize) = match encoding {
            Encoding::Gate => (
                GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
                N_GATE_FEATURES,
            ),
            Encoding::Raw => ((0..RAW_DIM).map(|k| format!("psi_{}", k + 1)).collect(), RAW_DIM),
        };
        let mut data = Vec::with_capacity(menus.len() * d);
        for m in menus {
            match encoding {
                Encoding::Gate => data.extend_from_slice(&gate_features(m, factor)),
                Encoding::Raw => data.extend_from_slice(&raw_encoding(m, factor)),
            }
        }
        FeatureSet {
            names,
            rescale_factor: factor,
            d,
            data,
        }
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>], factor: f64) -> Result<Self> {
        let d = names.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(FeatureSet {
            names,
            rescale_factor: factor,
            d,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.d).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn subset(&self, rows: &[usize]) -> FeatureSet {
        let mut data = Vec::with_capacity(rows.len() * self.d);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        FeatureSet {
            names: self.names.clone(),
            rescale_factor: self.rescale_factor,
            d: self.d,
            data,
        }
    }
}

/// Feature dump: `menu_id, z_1..z_12, tc, risk_asym`.
pub fn write_feature_dump<W: Write>(menus: &[Menu], factor: f64, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["menu_id".to_string()];
    header.extend((1..=N_GATE_FEATURES).map(|k| format!("z_{k}")));
    header.push("tc".into());
    header.push("risk_asym".into());
    w.write_record(&header)?;
    for m in menus {
        let z = gate_features(m, factor);
        let c = menu_covariates(m);
        let mut rec = vec![m.id.clone()];
        rec.extend(z.iter().map(|v| v.to_string()));
        rec.push(c.tc.to_string());
        rec.push(c.risk_asym.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
