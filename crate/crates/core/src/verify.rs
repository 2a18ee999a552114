//! Self-checks of the numerical building blocks.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::generators::expected_mk;
use crate::iid_tests::{bound_mean, BoundMode, TestKind};
use crate::numerics::{log_binomial_pmf, log_poisson_pmf, log_ratio_poisson_binomial, stirling_factor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Stirling,
    Pmf,
    Regime,
    BruteForce,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Stirling, Suite::Pmf, Suite::Regime, Suite::BruteForce];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Stirling => "stirling",
            Suite::Pmf => "pmf",
            Suite::Regime => "regime",
            Suite::BruteForce => "brute_force",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s || (s == "bruteforce" && *suite == Suite::BruteForce))
            .ok_or_else(|| format!("unknown suite `{s}`; expected stirling, pmf, regime or brute_force"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: u64,
    /// First few failing cases, described.
    pub failures: Vec<String>,
    pub failed: u64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

struct Tally {
    report: SuiteReport,
}

impl Tally {
    fn new(suite: Suite) -> Self {
        Tally {
            report: SuiteReport {
                suite,
                checks: 0,
                failures: Vec::new(),
                failed: 0,
            },
        }
    }

    fn check(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.report.checks += 1;
        if !ok {
            self.report.failed += 1;
            if self.report.failures.len() < 10 {
                self.report.failures.push(describe());
            }
        }
    }
}

pub fn run_suite(suite: Suite) -> SuiteReport {
    match suite {
        Suite::Stirling => stirling(),
        Suite::Pmf => pmf_normalisation(),
        Suite::Regime => ratio_regime(),
        Suite::BruteForce => brute_force(),
    }
}

/// `e^(−1/12k) ≤ 1 − ε̇_k ≤ e^(−1/(12k+1))` for k = 1..=10^5.
fn stirling() -> SuiteReport {
    let mut t = Tally::new(Suite::Stirling);
    for k in 1..=100_000u64 {
        let f = stirling_factor(k).expect("k >= 1");
        t.check(f.within_bracket(), || {
            format!("k={k}: {} not in [{}, {}]", f.one_minus_eps, f.lower, f.upper)
        });
    }
    t.report
}

fn pmf_normalisation() -> SuiteReport {
    let mut t = Tally::new(Suite::Pmf);
    for n in [1u64, 2, 7, 50, 1000, 20_000] {
        for theta in [1e-4, 0.01, 0.3, 0.5, 0.9, 0.999] {
            let total: f64 = (0..=n)
                .map(|k| log_binomial_pmf(k, n, theta).expect("valid").prob())
                .sum();
            t.check((total - 1.0).abs() < 1e-10, || {
                format!("binomial n={n} θ={theta}: Σ = {total}")
            });
        }
    }
    for lambda in [1e-3_f64, 0.5, 3.0, 40.0, 700.0] {
        let upper = (lambda + 40.0 * lambda.sqrt() + 40.0) as u64;
        let total: f64 = (0..=upper)
            .map(|k| log_poisson_pmf(k, lambda).expect("valid").prob())
            .sum();
        t.check((total - 1.0).abs() < 1e-10, || format!("poisson λ={lambda}: Σ = {total}"));
    }
    t.report
}

/// Poisson and binomial agree to 1% for n = 10^6, k ≤ 30, θ ≤ 3·10^-5.
fn ratio_regime() -> SuiteReport {
    let mut t = Tally::new(Suite::Regime);
    let n = 1_000_000;
    for k in 0..=30u64 {
        for step in 1..=30 {
            let theta = 3e-5 * step as f64 / 30.0;
            let ratio = log_ratio_poisson_binomial(k, n, theta).expect("valid").exp();
            t.check((ratio - 1.0).abs() <= 0.01, || format!("k={k} θ={theta}: ratio {ratio}"));
        }
    }
    t.report
}

/// Exact moments of a two-category source by enumerating all 2^n sequences.
pub struct TwoCategoryMoments {
    pub n: u64,
    pub theta: f64,
    /// `mu[k] = E[M_k]`, index 0 unused.
    pub mu: Vec<f64>,
    statistic_means: Vec<(TestKind, f64)>,
}

impl TwoCategoryMoments {
    pub fn enumerate(n: u64, theta: f64, kinds: &[TestKind]) -> Self {
        let mut mu = vec![0.0; n as usize + 2];
        let mut means = vec![0.0; kinds.len()];
        for seq in 0u64..(1 << n) {
            let a = seq.count_ones() as u64;
            let prob = theta.powi(a as i32) * (1.0 - theta).powi((n - a) as i32);
            let m = |k: u64| [a, n - a].iter().filter(|&&c| c == k).count() as f64;
            for k in 1..=n {
                mu[k as usize] += prob * m(k);
            }
            for (slot, kind) in means.iter_mut().zip(kinds) {
                let value = match *kind {
                    TestKind::Even => (2..n).step_by(2).map(|k| k as f64 * m(k)).sum(),
                    TestKind::Odd => (3..n).step_by(2).map(|k| k as f64 * m(k)).sum(),
                    TestKind::Count(k) => m(k),
                    TestKind::SlopeUpper(k) => m(k) - m(k - 1),
                    TestKind::SlopeLower(k) => m(k - 1) - m(k),
                    TestKind::Curvature(k) => 2.0 * m(k) - m(k - 1) - m(k + 1),
                    TestKind::LogCurvature(_) => 0.0,
                };
                *slot += prob * value;
            }
        }
        TwoCategoryMoments {
            n,
            theta,
            mu,
            statistic_means: kinds.iter().copied().zip(means).collect(),
        }
    }

    pub fn mean(&self, kind: TestKind) -> Option<f64> {
        self.statistic_means.iter().find(|(k, _)| *k == kind).map(|(_, v)| *v)
    }
}

fn multinomial_kinds(n: u64) -> Vec<TestKind> {
    let mut kinds = vec![TestKind::Even, TestKind::Odd];
    for k in 1..n {
        kinds.push(TestKind::Count(k));
        if k >= 2 {
            kinds.extend([
                TestKind::SlopeUpper(k),
                TestKind::SlopeLower(k),
                TestKind::Curvature(k),
            ]);
        }
    }
    kinds
}

/// For d = 2, n = 2..=8, θ = 0.1..=0.9: `expected_mk` matches enumeration and
/// every multinomial bound dominates the enumerated mean.
fn brute_force() -> SuiteReport {
    let mut t = Tally::new(Suite::BruteForce);
    for n in 2..=8u64 {
        let kinds = multinomial_kinds(n);
        for step in 1..=9 {
            let theta = step as f64 / 10.0;
            let exact = TwoCategoryMoments::enumerate(n, theta, &kinds);
            let formula = expected_mk(&[theta, 1.0 - theta], n, n).expect("valid θ");
            for k in 1..=n {
                let (want, got) = (exact.mu[k as usize], formula[k as usize - 1]);
                t.check((want - got).abs() <= 1e-12, || {
                    format!("E[M_{k}] n={n} θ={theta}: {got} vs {want}")
                });
            }
            for &kind in &kinds {
                let tau = bound_mean(kind, n, BoundMode::Multinomial).expect("k < n");
                let mean = exact.mean(kind).expect("enumerated");
                t.check(mean <= tau + 1e-12, || format!("{kind} n={n} θ={theta}: E = {mean} > τ = {tau}"));
            }
            // log-curvature: ln(μ_k²/(μ_{k−1}μ_{k+1})) ≤ ῡ^ub wherever defined
            for k in 2..n {
                let (lo, mid, hi) = (exact.mu[k as usize - 1], exact.mu[k as usize], exact.mu[k as usize + 1]);
                if lo > 0.0 && mid > 0.0 && hi > 0.0 {
                    let upsilon = 2.0 * mid.ln() - lo.ln() - hi.ln();
                    let bound = bound_mean(TestKind::LogCurvature(k), n, BoundMode::Multinomial).expect("k < n");
                    t.check(upsilon <= bound + 1e-12, || {
                        format!("logcurv:{k} n={n} θ={theta}: {upsilon} > {bound}")
                    });
                }
            }
        }
    }
    t.report
}
