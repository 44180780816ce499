//! Two-parameter Indian buffet process over binary sharing matrices.
//!
//! Rows are studies, columns are factors; a one in `(s, k)` means study `s`
//! loads on factor `k`. The sequential construction guarantees every column
//! has at least one active study. `beta` controls how readily factors are
//! shared across studies, `alpha` the overall number of factors:
//! `E[#columns] = alpha * sum_{s=1..S} beta / (beta + s - 1)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};

/// Indian buffet process parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbpConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl IbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0)
            || !self.alpha.is_finite()
            || !self.beta.is_finite()
        {
            return Err(Error::Config(format!(
                "IBP parameters must be positive and finite, got alpha={}, beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Expected number of columns for `s` rows.
    pub fn expected_columns(&self, s: usize) -> f64 {
        (1..=s)
            .map(|i| self.beta / (self.beta + (i - 1) as f64))
            .map(|v| self.alpha * v)
            .sum()
    }

    /// Rate of fresh columns introduced by row `s` (1-based) in the
    /// sequential construction; also the conditional rate of row-specific
    /// singleton columns given the rest, by exchangeability.
    pub fn new_column_rate(&self, s_one_based: usize, total_rows: usize) -> f64 {
        debug_assert!(s_one_based >= 1 && s_one_based <= total_rows);
        self.alpha * self.beta / (self.beta + (s_one_based - 1) as f64)
    }
}

/// Draw an `S x K` binary sharing matrix from the process. `K` is random;
/// every drawn column has at least one active row.
pub fn ibp_sample_sharing<R: Rng>(
    n_rows: usize,
    cfg: &IbpConfig,
    rng: &mut R,
) -> Result<DMatrix<u8>> {
    cfg.validate()?;
    if n_rows == 0 {
        return Err(Error::Dimension("IBP needs at least one row".into()));
    }
    // Column occupation counts; columns are appended as rows introduce them.
    let mut counts: Vec<u32> = Vec::new();
    let mut rows: Vec<Vec<u8>> = Vec::with_capacity(n_rows);
    for s in 1..=n_rows {
        let mut row = vec![0u8; counts.len()];
        let denom = cfg.beta + (s - 1) as f64;
        for (k, c) in counts.iter_mut().enumerate() {
            if rng.gen_range(0.0..1.0) < f64::from(*c) / denom {
                row[k] = 1;
                *c += 1;
            }
        }
        let rate = cfg.alpha * cfg.beta / denom;
        let fresh = Poisson::new(rate)
            .map_err(|e| Error::Numeric(format!("Poisson rate {rate}: {e}")))?
            .sample(rng) as usize;
        for _ in 0..fresh {
            row.push(1);
            counts.push(1);
        }
        rows.push(row);
    }
    let k_total = counts.len();
    let mut m = DMatrix::zeros(n_rows, k_total);
    for (s, row) in rows.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            m[(s, k)] = v;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn single_row_column_count_is_poisson() {
        let cfg = IbpConfig {
            alpha: 3.0,
            beta: 1.0,
        };
        let mut rng = seeded_rng(31);
        let n = 20_000;
        let counts: Vec<f64> = (0..n)
            .map(|_| ibp_sample_sharing(1, &cfg, &mut rng).unwrap().ncols() as f64)
            .collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        let var = counts.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - 3.0).abs() < 3.0 * se, "mean {mean} vs 3 (se {se})");
    }

    #[test]
    fn no_empty_columns_ever() {
        let cfg = IbpConfig {
            alpha: 2.0,
            beta: 1.5,
        };
        let mut rng = seeded_rng(32);
        for _ in 0..1000 {
            let m = ibp_sample_sharing(5, &cfg, &mut rng).unwrap();
            for k in 0..m.ncols() {
                let ones: u32 = (0..m.nrows()).map(|s| u32::from(m[(s, k)])).sum();
                assert!(ones >= 1, "empty column in {m}");
            }
        }
    }

    #[test]
    fn mean_columns_match_harmonic_sum() {
        // alpha = 5, beta = 1, S = 4: expectation 5 * (1 + 1/2 + 1/3 + 1/4).
        let cfg = IbpConfig {
            alpha: 5.0,
            beta: 1.0,
        };
        assert!((cfg.expected_columns(4) - 10.416666666666666).abs() < 1e-12);
        let mut rng = seeded_rng(33);
        let n = 20_000;
        let counts: Vec<f64> = (0..n)
            .map(|_| ibp_sample_sharing(4, &cfg, &mut rng).unwrap().ncols() as f64)
            .collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        let var = counts.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - cfg.expected_columns(4)).abs() < 3.0 * se,
            "mean {mean} vs {} (se {se})",
            cfg.expected_columns(4)
        );
    }

    #[test]
    fn row_sums_are_exchangeable() {
        // Two-sample Kolmogorov-Smirnov between first and last row sums over
        // 10^4 draws; the statistic must stay below the 1% critical value.
        let cfg = IbpConfig {
            alpha: 2.0,
            beta: 2.0,
        };
        let mut rng = seeded_rng(34);
        let n = 10_000;
        let mut first = Vec::with_capacity(n);
        let mut last = Vec::with_capacity(n);
        for _ in 0..n {
            let m = ibp_sample_sharing(4, &cfg, &mut rng).unwrap();
            let row_sum = |s: usize| (0..m.ncols()).map(|k| u32::from(m[(s, k)])).sum::<u32>();
            first.push(row_sum(0));
            last.push(row_sum(3));
        }
        let max_val = *first.iter().chain(last.iter()).max().unwrap();
        let mut d = 0.0f64;
        for v in 0..=max_val {
            let f1 = first.iter().filter(|&&x| x <= v).count() as f64 / n as f64;
            let f2 = last.iter().filter(|&&x| x <= v).count() as f64 / n as f64;
            d = d.max((f1 - f2).abs());
        }
        let critical = 1.628 * (2.0 / n as f64).sqrt();
        assert!(d < critical, "KS statistic {d} >= critical {critical}");
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut rng = seeded_rng(35);
        let bad = IbpConfig {
            alpha: 0.0,
            beta: 1.0,
        };
        assert!(ibp_sample_sharing(3, &bad, &mut rng).is_err());
        let good = IbpConfig {
            alpha: 1.0,
            beta: 1.0,
        };
        assert!(ibp_sample_sharing(0, &good, &mut rng).is_err());
    }
}
