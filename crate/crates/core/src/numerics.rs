//! Log-space distribution primitives: binomial and Poisson pmfs, the Stirling
//! factor, the standard normal CDF/quantile and the Poissonization factor c_n.
//!
//! The pmfs use Loader's saddle-point form (Stirling remainder plus a
//! deviance term) rather than differences of log-gamma values, so they stay
//! accurate to a few ulps for n up to 10^9 where `ln n!` alone is ~2e10.

use std::f64::consts::PI;
use std::fmt;

use thiserror::Error;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Beyond this the upper normal tail is evaluated by its asymptotic series.
const SF_SERIES_THRESHOLD: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{name} = {value} is outside {range}")]
    OutOfDomain {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
}

fn out_of_domain(name: &'static str, value: f64, range: &'static str) -> NumericsError {
    NumericsError::OutOfDomain { name, value, range }
}

/// A natural-log probability, `ln p` with `p ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogProb(f64);

impl LogProb {
    pub const ZERO: LogProb = LogProb(f64::NEG_INFINITY);
    pub const ONE: LogProb = LogProb(0.0);

    pub(crate) fn new(value: f64) -> Self {
        debug_assert!(value <= 1e-12 || value.is_nan(), "log-probability {value} > 0");
        LogProb(value.min(0.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }
}

impl fmt::Display for LogProb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ln p = {}", self.0)
    }
}

/// Stirling remainder `ln k! − (k + ½) ln k + k − ½ ln 2π`.
///
/// Exact (via `lgamma`) for small k, truncated asymptotic series otherwise;
/// the cut-offs follow Loader (2000).
pub fn stirling_remainder(k: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;

    if k <= 15.0 {
        return libm::lgamma(k + 1.0) - (k + 0.5) * k.ln() + k - LN_SQRT_2PI;
    }
    let kk = k * k;
    if k > 500.0 {
        (S0 - S1 / kk) / k
    } else if k > 80.0 {
        (S0 - (S1 - S2 / kk) / kk) / k
    } else if k > 35.0 {
        (S0 - (S1 - (S2 - S3 / kk) / kk) / kk) / k
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / kk) / kk) / kk) / kk) / k
    }
}

/// Deviance term `x ln(x/m) + m − x`, evaluated by series when x ≈ m.
fn deviance(x: f64, m: f64) -> f64 {
    if x == 0.0 {
        return m;
    }
    if (x - m).abs() < 0.1 * (x + m) {
        let v = (x - m) / (x + m);
        let mut s = (x - m) * v;
        let mut ej = 2.0 * x * v;
        let v2 = v * v;
        for j in 1..1000 {
            ej *= v2;
            let next = s + ej / f64::from(2 * j + 1);
            if next == s {
                return s;
            }
            s = next;
        }
        return s;
    }
    x * (x / m).ln() + m - x
}

/// `ln[C(n,k) θ^k (1−θ)^(n−k)]` with `0^0 = 1`.
pub fn log_binomial_pmf(k: u64, n: u64, theta: f64) -> Result<LogProb, NumericsError> {
    if k > n {
        return Err(out_of_domain("k", k as f64, "0..=n"));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(out_of_domain("theta", theta, "[0, 1]"));
    }
    Ok(LogProb::new(log_binomial_unchecked(k, n, theta)))
}

pub(crate) fn log_binomial_unchecked(k: u64, n: u64, theta: f64) -> f64 {
    if theta == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if theta == 1.0 {
        return if k == n { 0.0 } else { f64::NEG_INFINITY };
    }
    let nf = n as f64;
    if k == 0 {
        return nf * (-theta).ln_1p();
    }
    if k == n {
        return nf * theta.ln();
    }
    let kf = k as f64;
    let rest = (n - k) as f64;
    let lc = stirling_remainder(nf)
        - stirling_remainder(kf)
        - stirling_remainder(rest)
        - deviance(kf, nf * theta)
        - deviance(rest, nf * (1.0 - theta));
    let lf = LN_2PI + kf.ln() + (-kf / nf).ln_1p();
    lc - 0.5 * lf
}

/// `ln[λ^k e^(−λ) / k!]`; `λ = 0` puts all mass on `k = 0`.
pub fn log_poisson_pmf(k: u64, lambda: f64) -> Result<LogProb, NumericsError> {
    if !(lambda >= 0.0) || lambda.is_infinite() {
        return Err(out_of_domain("lambda", lambda, "[0, ∞)"));
    }
    Ok(LogProb::new(log_poisson_unchecked(k as f64, lambda)))
}

pub(crate) fn log_poisson_unchecked(k: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if k == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if k == 0.0 {
        return -lambda;
    }
    -stirling_remainder(k) - deviance(k, lambda) - 0.5 * (2.0 * PI * k).ln()
}

/// The exact Stirling ratio `1 − ε̇_k = k^k e^(−k) √(2πk) / k!` together with
/// its two-sided bracket `[e^(−1/12k), e^(−1/(12k+1))]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StirlingFactor {
    pub k: u64,
    pub one_minus_eps: f64,
    pub lower: f64,
    pub upper: f64,
}

impl StirlingFactor {
    pub fn within_bracket(&self) -> bool {
        self.lower <= self.one_minus_eps && self.one_minus_eps <= self.upper
    }

    /// `ε̇_k` itself.
    pub fn eps(&self) -> f64 {
        -(-stirling_remainder(self.k as f64)).exp_m1()
    }
}

pub fn stirling_factor(k: u64) -> Result<StirlingFactor, NumericsError> {
    if k == 0 {
        return Err(out_of_domain("k", 0.0, "k >= 1"));
    }
    let kf = k as f64;
    let factor = StirlingFactor {
        k,
        one_minus_eps: (-stirling_remainder(kf)).exp(),
        lower: (-1.0 / (12.0 * kf)).exp(),
        upper: (-1.0 / (12.0 * kf + 1.0)).exp(),
    };
    debug_assert!(factor.within_bracket(), "Stirling bracket violated at k = {k}");
    Ok(factor)
}

/// Standard normal CDF Φ(y).
pub fn normal_cdf(y: f64) -> f64 {
    0.5 * libm::erfc(-y / std::f64::consts::SQRT_2)
}

/// `ln(1 − Φ(y))`, finite for every finite y.
pub fn log_normal_sf(y: f64) -> f64 {
    if y.is_nan() {
        return f64::NAN;
    }
    if y == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    if y < 0.0 {
        // 1 − Φ(y) is close to 1; keep the tiny deficit
        return (-normal_cdf(y)).ln_1p();
    }
    if y <= SF_SERIES_THRESHOLD {
        return (0.5 * libm::erfc(y / std::f64::consts::SQRT_2)).ln();
    }
    // Mills-ratio series 1 − 1/y² + 3/y⁴ − …, truncated at its smallest term.
    let inv2 = 1.0 / (y * y);
    let mut term = 1.0;
    let mut sum = 1.0_f64;
    let mut j = 1.0_f64;
    loop {
        let next = -term * (2.0 * j - 1.0) * inv2;
        if next.abs() >= term.abs() || next.abs() < 1e-17 * sum.abs() {
            break;
        }
        sum += next;
        term = next;
        j += 1.0;
    }
    -0.5 * y * y - y.ln() - LN_SQRT_2PI + sum.ln()
}

/// `ln Φ(y)`.
pub fn log_normal_cdf(y: f64) -> f64 {
    log_normal_sf(-y)
}

/// Φ⁻¹(q): Acklam's rational approximation polished with Halley steps.
pub fn normal_quantile(q: f64) -> Result<f64, NumericsError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(out_of_domain("q", q, "(0, 1)"));
    }
    if q > 0.5 {
        // 1 − q is exact here
        return Ok(-lower_quantile(1.0 - q));
    }
    Ok(lower_quantile(q))
}

fn lower_quantile(q: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let mut x = if q < P_LOW {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    } else {
        let s = q - 0.5;
        let r = s * s;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * s
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..3 {
        let e = normal_cdf(x) - q;
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        let step = u / (1.0 + 0.5 * x * u);
        if !step.is_finite() {
            break;
        }
        x -= step;
    }
    x
}

/// `ln c_n = ln n! − n ln n + n`, the log of `1 / P_n(n)`.
pub fn log_cn(n: u64) -> Result<f64, NumericsError> {
    if n == 0 {
        return Err(out_of_domain("n", 0.0, "n >= 1"));
    }
    let nf = n as f64;
    Ok(stirling_remainder(nf) + 0.5 * (2.0 * PI * nf).ln())
}

/// `ln[P_{nθ}(k) / f_k^n(θ)]`, the log ratio of the Poisson approximation to the
/// binomial pmf it replaces.
pub fn log_ratio_poisson_binomial(k: u64, n: u64, theta: f64) -> Result<f64, NumericsError> {
    if k >= n {
        return Err(out_of_domain("k", k as f64, "0..n"));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(out_of_domain("theta", theta, "(0, 1)"));
    }
    let poisson = log_poisson_unchecked(k as f64, n as f64 * theta);
    Ok(poisson - log_binomial_unchecked(k, n, theta))
}
