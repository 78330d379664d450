//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::DMatrix;

/// Relative cutoff for numerical rank: singular values at or below
/// `RANK_TOL * sigma_1` count as zero.
pub const RANK_TOL: f64 = 1e-8;

/// Singular values sorted in non-increasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn rank_from_singular(s: &[f64]) -> usize {
    match s.first() {
        Some(&s1) if s1 > 0.0 => s.iter().filter(|&&v| v > RANK_TOL * s1).count(),
        _ => 0,
    }
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    rank_from_singular(&singular_values(m))
}

/// Matrix with a leading column of ones.
pub fn augment_ones(rows: &[&[f64]]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d + 1, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] })
}

/// Rank of `[1, x]` over the given rows.
pub fn affine_rank(rows: &[&[f64]]) -> usize {
    if rows.is_empty() {
        return 0;
    }
    numerical_rank(&augment_ones(rows))
}

pub fn row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Interquartile range over 1.349: matches the standard deviation for
/// normal data and ignores the tails.
pub fn robust_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    (quantile(v, 0.75) - quantile(v, 0.25)) / 1.349
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks() {
        let one = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert_eq!(numerical_rank(&one), 1);
        let prop = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, -1.0, -2.0, -3.0]);
        assert_eq!(numerical_rank(&prop), 1);
        assert_eq!(numerical_rank(&DMatrix::zeros(2, 2)), 0);
        let a: [&[f64]; 3] = [&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]];
        assert_eq!(affine_rank(&a), 3);
        let b: [&[f64]; 3] = [&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0]];
        assert_eq!(affine_rank(&b), 2);
    }

    #[test]
    fn summaries() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((sample_sd(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn robust_sd_ignores_outliers() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert!((quantile(&[0.0, 10.0], 0.25) - 2.5).abs() < 1e-15);
        let mut v: Vec<f64> = (1..=99).map(|i| i as f64).collect();
        let base = robust_sd(&v);
        v.push(1e9);
        assert!((robust_sd(&v) - base).abs() < 1.0);
        assert_eq!(robust_sd(&[1.0]), 0.0);
    }
}
