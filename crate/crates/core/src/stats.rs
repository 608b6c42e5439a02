//! Summary statistics, confidence intervals, the pooled two-sample t-test
//! and Fisher's exact test on 2x2 tables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959964;

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; zero when `n == 1`.
    pub sd: f64,
}

impl SummaryStats {
    /// A single observation carries no spread information.
    pub fn is_degenerate(&self) -> bool {
        self.n < 2
    }
}

pub fn summarize(samples: &[f64]) -> Result<SummaryStats> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("samples"));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        0.0
    } else {
        (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(SummaryStats { n, mean, sd })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    Ok(())
}

/// Standard normal quantile by bisection on the complementary error function.
fn normal_quantile(p: f64) -> f64 {
    let cdf = |x: f64| 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2);
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `mean +- z * sd / sqrt(n)`; `z` is 1.959964 at the 95% level.
pub fn normal_ci(stats: &SummaryStats, level: f64) -> Result<Interval> {
    check_level(level)?;
    if stats.n < 2 {
        return Err(Error::InvalidParameter(format!(
            "normal_ci needs n >= 2, got {}",
            stats.n
        )));
    }
    let z = if level == 0.95 {
        Z_95
    } else {
        normal_quantile(0.5 + level / 2.0)
    };
    let half = z * stats.sd / (stats.n as f64).sqrt();
    Ok(Interval {
        lo: stats.mean - half,
        hi: stats.mean + half,
        level,
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Percentile bootstrap of the mean. Resample `b` uses its own ChaCha stream
/// derived from `(seed, b)`, so the result does not depend on thread count.
pub fn bootstrap_ci(samples: &[f64], resamples: usize, level: f64, seed: u64) -> Result<Interval> {
    check_level(level)?;
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if resamples < 100 {
        return Err(Error::InvalidParameter(format!(
            "bootstrap needs at least 100 resamples, got {resamples}"
        )));
    }
    let n = samples.len();
    let mut means: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut acc = 0.0;
            for _ in 0..n {
                acc += samples[rng.random_range(0..n)];
            }
            acc / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(Interval {
        lo: quantile_sorted(&means, alpha / 2.0),
        hi: quantile_sorted(&means, 1.0 - alpha / 2.0),
        level,
    })
}

/// Box-plot summary: quartiles, and whiskers at the central 98% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub whisker_lo: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_hi: f64,
}

pub fn box_stats(samples: &[f64]) -> Result<BoxStats> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("samples"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p| quantile_sorted(&s, p);
    Ok(BoxStats {
        n: s.len(),
        whisker_lo: q(0.01),
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        whisker_hi: q(0.99),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Student's two-sample t-test with pooled variance; positive `t` means
/// `x` has the larger mean.
pub fn pooled_t_test(x: &SummaryStats, y: &SummaryStats) -> Result<TTest> {
    if x.n < 2 || y.n < 2 {
        return Err(Error::InvalidParameter(format!(
            "t-test needs n >= 2 in both groups, got {} and {}",
            x.n, y.n
        )));
    }
    let df = (x.n + y.n - 2) as f64;
    let sp2 = ((x.n - 1) as f64 * x.sd * x.sd + (y.n - 1) as f64 * y.sd * y.sd) / df;
    if sp2 <= 0.0 {
        return Err(Error::Degenerate(
            "both groups have zero variance; t is undefined".into(),
        ));
    }
    let se = (sp2 * (1.0 / x.n as f64 + 1.0 / y.n as f64)).sqrt();
    let t = (x.mean - y.mean) / se;
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0);
    Ok(TTest { t, p, df })
}

/// Rows: hypothesis satisfied / not satisfied. Columns: responder / not.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl Contingency2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Result<Self> {
        let t = Self { a, b, c, d };
        if t.total() == 0 {
            return Err(Error::Empty("contingency table"));
        }
        Ok(t)
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn transpose(&self) -> Self {
        Self {
            a: self.a,
            b: self.c,
            c: self.b,
            d: self.d,
        }
    }

    /// Swaps both rows and both columns.
    pub fn rotate(&self) -> Self {
        Self {
            a: self.d,
            b: self.c,
            c: self.b,
            d: self.a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherResult {
    /// `a*d / (b*c)`; infinite when `b*c == 0` and `a*d > 0`, NaN when both
    /// products vanish.
    pub odds_ratio: f64,
    pub p: f64,
}

/// Hypergeometric probabilities of every table sharing the margins of
/// `table`, indexed by the top-left cell starting at its minimum.
pub fn hypergeometric_probabilities(table: &Contingency2x2) -> (u64, Vec<f64>) {
    let r1 = table.a + table.b;
    let r2 = table.c + table.d;
    let c1 = table.a + table.c;
    let n = table.total();
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let ln_denom = ln_factorial(n)
        - ln_factorial(r1)
        - ln_factorial(r2)
        - ln_factorial(c1)
        - ln_factorial(n - c1);
    let probs = (lo..=hi)
        .map(|a| {
            let b = r1 - a;
            let c = c1 - a;
            let d = r2 - c;
            (-(ln_denom + ln_factorial(a) + ln_factorial(b) + ln_factorial(c) + ln_factorial(d)))
                .exp()
        })
        .collect();
    (lo, probs)
}

/// Two-sided Fisher exact test: sums the probabilities of all tables with
/// the observed margins that are no more likely than the observed one,
/// with a relative slack of 1e-7 for ties.
pub fn fisher_exact(table: &Contingency2x2) -> Result<FisherResult> {
    if table.total() == 0 {
        return Err(Error::Empty("contingency table"));
    }
    let (lo, probs) = hypergeometric_probabilities(table);
    let observed = probs[(table.a - lo) as usize];
    let cutoff = observed * (1.0 + 1e-7);
    let p: f64 = probs.iter().filter(|&&q| q <= cutoff).sum();
    let ad = (table.a * table.d) as f64;
    let bc = (table.b * table.c) as f64;
    let odds_ratio = if bc == 0.0 {
        if ad == 0.0 {
            f64::NAN
        } else {
            f64::INFINITY
        }
    } else {
        ad / bc
    };
    Ok(FisherResult {
        odds_ratio,
        p: p.min(1.0),
    })
}

/// Machine-readable result line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub test: String,
    pub inputs: serde_json::Value,
    pub statistic: Option<f64>,
    pub p: Option<f64>,
    pub interval: Option<Interval>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_stats_of_a_ramp() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        let b = box_stats(&v).unwrap();
        assert_eq!(
            (b.whisker_lo, b.q1, b.median, b.q3, b.whisker_hi),
            (1.0, 25.0, 50.0, 75.0, 99.0)
        );
        assert!(box_stats(&[]).is_err());
    }

    #[test]
    fn summaries() {
        let s = summarize(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((s.n, s.mean, s.sd), (3, 2.0, 0.0));
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.sd), (2.0, 1.0));
        let s = summarize(&[4.5]).unwrap();
        assert!(s.is_degenerate() && s.mean == 4.5);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn normal_interval_by_hand() {
        let s = SummaryStats {
            n: 3,
            mean: 2.0,
            sd: 1.0,
        };
        let ci = normal_ci(&s, 0.95).unwrap();
        assert!((ci.lo - 0.868).abs() < 1e-3 && (ci.hi - 3.132).abs() < 1e-3);
        let z = SummaryStats { sd: 0.0, ..s };
        let ci0 = normal_ci(&z, 0.95).unwrap();
        assert_eq!((ci0.lo, ci0.hi), (2.0, 2.0));
        let big = SummaryStats { n: 6, ..s };
        let ratio = ci.width() / normal_ci(&big, 0.95).unwrap().width();
        assert!((ratio - 2f64.sqrt()).abs() < 1e-12);
        assert!(normal_ci(&SummaryStats { n: 1, ..s }, 0.95).is_err());
    }

    #[test]
    fn normal_quantile_matches_tabulated() {
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-6);
        assert!((normal_quantile(0.99) - 2.326348).abs() < 1e-6);
    }

    #[test]
    fn bootstrap_constant_and_seeded() {
        let ci = bootstrap_ci(&[3.0; 50], 200, 0.95, 1).unwrap();
        assert_eq!((ci.lo, ci.hi), (3.0, 3.0));
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = bootstrap_ci(&x, 500, 0.95, 9).unwrap();
        let b = bootstrap_ci(&x, 500, 0.95, 9).unwrap();
        assert_eq!(a.lo.to_bits(), b.lo.to_bits());
        assert_eq!(a.hi.to_bits(), b.hi.to_bits());
        assert!(bootstrap_ci(&x, 50, 0.95, 9).is_err());
        assert!(bootstrap_ci(&[], 500, 0.95, 9).is_err());
    }

    #[test]
    fn t_test_by_hand() {
        let x = SummaryStats {
            n: 1000,
            mean: 1.04,
            sd: 0.1,
        };
        let y = SummaryStats {
            n: 1000,
            mean: 1.00,
            sd: 0.1,
        };
        // sp = 0.1, se = 0.1 * sqrt(2/1000), t = 0.04 / se
        let expect = 0.04 / (0.1 * (2.0f64 / 1000.0).sqrt());
        let r = pooled_t_test(&x, &y).unwrap();
        assert!((r.t - expect).abs() < 1e-9 && (r.t - 8.944).abs() < 1e-2);
        let s = pooled_t_test(&y, &x).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p, r.p);
        let same = pooled_t_test(&x, &x).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
    }

    #[test]
    fn t_tail_matches_tabulated_quantiles() {
        // Two-sided 5% critical values of Student's t.
        for (df, crit) in [(1usize, 12.706205), (5, 2.570582), (30, 2.042272)] {
            let p = beta_reg(df as f64 / 2.0, 0.5, df as f64 / (df as f64 + crit * crit));
            assert!((p - 0.05).abs() < 1e-6, "df {df}: {p}");
        }
    }

    #[test]
    fn fisher_known_tables() {
        let r = fisher_exact(&Contingency2x2::new(5, 5, 5, 5).unwrap()).unwrap();
        assert_eq!(r.odds_ratio, 1.0);
        assert!((r.p - 1.0).abs() < 1e-12);
        // Tea-tasting table: tables with margins 4/4 have mass (1, 16, 36, 16, 1) / 70.
        let tea = fisher_exact(&Contingency2x2::new(3, 1, 1, 3).unwrap()).unwrap();
        assert!((tea.p - 34.0 / 70.0).abs() < 1e-12, "{}", tea.p);
        let inf = fisher_exact(&Contingency2x2::new(4, 0, 1, 3).unwrap()).unwrap();
        assert!(inf.odds_ratio.is_infinite());
        assert!(Contingency2x2::new(0, 0, 0, 0).is_err());
    }

    #[test]
    fn hypergeometric_mass_sums_to_one() {
        for t in [
            (12, 4, 9, 13),
            (11, 3, 10, 14),
            (0, 7, 30, 1),
            (50, 60, 70, 80),
        ] {
            let table = Contingency2x2::new(t.0, t.1, t.2, t.3).unwrap();
            let (_, p) = hypergeometric_probabilities(&table);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
