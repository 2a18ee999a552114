//! Monte Carlo experiments: p-value distributions and rejection curves.
//!
//! Repetition `r` samples with a generator seeded by `seed ⊕ r`, so results do
//! not depend on how repetitions are scheduled across worker threads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generators::{expected_mk_for, Corruption, GeneratorError, GeneratorSpec, Sampler};
use crate::iid_tests::{bonferroni, run_suite, TestError, TestKind, TestOptions};

/// Series name of the Bonferroni combination over all configured tests.
pub const COMBINED: &str = "bonferroni";
/// Series name of the uniform-random control p-value.
pub const CONTROL: &str = "u";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Test(#[from] TestError),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("no p-values to summarise")]
    EmptyPValues,
    #[error("cannot start worker pool: {0}")]
    Pool(String),
    #[error("malformed CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One configured test and the options it runs with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub test: TestKind,
    #[serde(flatten)]
    pub options: TestOptions,
}

/// Requested type-I check: every test must satisfy
/// `β̂(alpha) ≤ alpha + sigmas·√(alpha(1−alpha)/reps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityCheck {
    pub alpha: f64,
    #[serde(default = "default_sigmas")]
    pub sigmas: f64,
}

fn default_sigmas() -> f64 {
    3.0
}

fn default_reps() -> u64 {
    2_000
}

fn default_alpha_star() -> f64 {
    0.05
}

pub fn default_alpha_grid() -> Vec<f64> {
    vec![
        0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    pub tests: Vec<TestSpec>,
    #[serde(default = "default_reps")]
    pub reps: u64,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_alpha_star")]
    pub alpha_star: f64,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `None` uses all cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<ValidityCheck>,
}

impl ExperimentConfig {
    pub fn new(generator: GeneratorSpec, tests: Vec<TestSpec>) -> Self {
        ExperimentConfig {
            generator,
            tests,
            reps: default_reps(),
            alpha_grid: default_alpha_grid(),
            alpha_star: default_alpha_star(),
            seed: 0,
            workers: None,
            validity: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.generator.validate()?;
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if self.reps == 0 {
            return fail("reps must be at least 1".into());
        }
        if self.tests.is_empty() {
            return fail("at least one test is required".into());
        }
        if self.alpha_grid.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return fail("alpha_grid entries must lie in (0, 1)".into());
        }
        if self.alpha_grid.windows(2).any(|w| w[0] >= w[1]) {
            return fail("alpha_grid must be strictly ascending".into());
        }
        if !(self.alpha_star > 0.0 && self.alpha_star < 1.0) {
            return fail("alpha_star must lie in (0, 1)".into());
        }
        if self.workers == Some(0) {
            return fail("workers must be at least 1".into());
        }
        if let Some(v) = self.validity {
            if !(v.alpha > 0.0 && v.alpha < 1.0) || !(v.sigmas >= 0.0) {
                return fail("validity check needs alpha in (0, 1) and sigmas >= 0".into());
            }
        }
        for spec in &self.tests {
            spec.test.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub fraction: f64,
    pub stderr: f64,
}

fn rate(hits: usize, reps: usize, alpha: f64) -> CurvePoint {
    let fraction = hits as f64 / reps as f64;
    CurvePoint {
        alpha,
        fraction,
        stderr: (fraction * (1.0 - fraction) / reps as f64).sqrt(),
    }
}

/// `β̂(α) = #{p ≤ α}/R` at each grid point.
pub fn rejection_curve(pvalues: &[f64], alpha_grid: &[f64]) -> Result<Vec<CurvePoint>, HarnessError> {
    if pvalues.is_empty() {
        return Err(HarnessError::EmptyPValues);
    }
    let mut sorted = pvalues.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(alpha_grid
        .iter()
        .map(|&alpha| rate(sorted.partition_point(|&p| p <= alpha), sorted.len(), alpha))
        .collect())
}

/// Everything recorded about one test across all repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSeries {
    pub test: String,
    pub k: Option<u64>,
    pub pvalues: Vec<f64>,
    pub curve: Vec<CurvePoint>,
    pub headline: CurvePoint,
    pub median_p: f64,
}

impl TestSeries {
    fn new(test: String, k: Option<u64>, pvalues: Vec<f64>, grid: &[f64], alpha_star: f64) -> Self {
        let curve = rejection_curve(&pvalues, grid).expect("reps >= 1");
        let headline = rejection_curve(&pvalues, &[alpha_star]).expect("reps >= 1")[0];
        let mut sorted = pvalues.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median_p = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        TestSeries {
            test,
            k,
            pvalues,
            curve,
            headline,
            median_p,
        }
    }

    pub fn label(&self) -> String {
        match self.k {
            Some(k) => format!("{}:{}", self.test, k),
            None => self.test.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MkRow {
    pub k: u64,
    pub sample_m: u64,
    pub avg_m: f64,
    pub expected_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityOutcome {
    pub alpha: f64,
    pub limit: f64,
    /// Labels of the series whose rejection rate exceeded the limit.
    pub failures: Vec<String>,
}

impl ValidityOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub reps: u64,
    pub alpha_grid: Vec<f64>,
    pub alpha_star: f64,
    /// Configured tests in order, then the Bonferroni combination, then the control.
    pub series: Vec<TestSeries>,
    pub mk: Vec<MkRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<ValidityOutcome>,
}

struct Repetition {
    pvalues: Vec<f64>,
    control: f64,
    multiplicities: BTreeMap<u64, u64>,
}

fn run_repetition(
    cfg: &ExperimentConfig,
    sampler: &Sampler,
    rep: u64,
) -> Result<Repetition, HarnessError> {
    let seed = cfg.seed ^ rep;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = sampler.sample_with(&mut rng);
    let mut pvalues = Vec::with_capacity(cfg.tests.len());
    for spec in &cfg.tests {
        let result = run_suite(&[spec.test], &profile, &spec.options)?;
        pvalues.push(result[0].p);
    }
    let mut control_rng = ChaCha8Rng::seed_from_u64(seed);
    control_rng.set_stream(1);
    // (0, 1] so that p ≤ α has probability exactly α
    let control = 1.0 - control_rng.random::<f64>();
    Ok(Repetition {
        pvalues,
        control,
        multiplicities: profile.multiplicities().clone(),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let sampler = Sampler::new(cfg.generator)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let reps: Vec<Repetition> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_repetition(cfg, &sampler, rep))
            .collect::<Result<_, _>>()
    })?;

    let grid = &cfg.alpha_grid;
    let mut series = Vec::with_capacity(cfg.tests.len() + 2);
    for (i, spec) in cfg.tests.iter().enumerate() {
        let ps = reps.iter().map(|r| r.pvalues[i]).collect();
        series.push(TestSeries::new(
            spec.test.name().to_string(),
            spec.test.k(),
            ps,
            grid,
            cfg.alpha_star,
        ));
    }
    let combined = reps
        .iter()
        .map(|r| bonferroni(&r.pvalues).map(|c| c.p))
        .collect::<Result<Vec<_>, _>>()?;
    series.push(TestSeries::new(COMBINED.into(), None, combined, grid, cfg.alpha_star));
    let control = reps.iter().map(|r| r.control).collect();
    series.push(TestSeries::new(CONTROL.into(), None, control, grid, cfg.alpha_star));

    let mk = mk_rows(cfg, &reps)?;
    let validity = cfg.validity.map(|check| {
        let limit = check.alpha + check.sigmas * (check.alpha * (1.0 - check.alpha) / cfg.reps as f64).sqrt();
        let failures = series
            .iter()
            .filter(|s| s.test != CONTROL)
            .filter(|s| {
                let hits = s.pvalues.iter().filter(|&&p| p <= check.alpha).count();
                hits as f64 / cfg.reps as f64 > limit
            })
            .map(TestSeries::label)
            .collect();
        ValidityOutcome {
            alpha: check.alpha,
            limit,
            failures,
        }
    });

    Ok(ExperimentReport {
        reps: cfg.reps,
        alpha_grid: grid.clone(),
        alpha_star: cfg.alpha_star,
        series,
        mk,
        validity,
    })
}

fn mk_rows(cfg: &ExperimentConfig, reps: &[Repetition]) -> Result<Vec<MkRow>, HarnessError> {
    let k_max = reps
        .iter()
        .filter_map(|r| r.multiplicities.keys().next_back().copied())
        .max()
        .unwrap_or(0);
    let mut totals = vec![0u64; k_max as usize];
    for r in reps {
        for (&k, &m) in &r.multiplicities {
            totals[k as usize - 1] += m;
        }
    }
    // the expectation always refers to the uncorrupted source
    let clean = GeneratorSpec {
        corruption: Corruption::None,
        ..cfg.generator
    };
    let expected = expected_mk_for(&clean, k_max)?;
    let sample = &reps[0].multiplicities;
    Ok((1..=k_max)
        .map(|k| MkRow {
            k,
            sample_m: sample.get(&k).copied().unwrap_or(0),
            avg_m: totals[k as usize - 1] as f64 / reps.len() as f64,
            expected_m: expected[k as usize - 1],
        })
        .collect())
}

fn k_cell(k: Option<u64>) -> String {
    k.map(|k| k.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    pub fn series(&self, label: &str) -> Option<&TestSeries> {
        self.series.iter().find(|s| s.label() == label)
    }

    pub fn pvalues_csv(&self) -> String {
        let mut out = String::from("rep,test,k,p\n");
        for rep in 0..self.reps as usize {
            for s in &self.series {
                let _ = writeln!(out, "{},{},{},{}", rep, s.test, k_cell(s.k), s.pvalues[rep]);
            }
        }
        out
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("test,k,alpha,fraction,stderr\n");
        for s in &self.series {
            for c in &s.curve {
                let _ = writeln!(out, "{},{},{},{},{}", s.test, k_cell(s.k), c.alpha, c.fraction, c.stderr);
            }
        }
        out
    }

    pub fn mk_csv(&self) -> String {
        let mut out = String::from("k,sample_m,avg_m,expected_m\n");
        for row in &self.mk {
            let _ = writeln!(out, "{},{},{},{}", row.k, row.sample_m, row.avg_m, row.expected_m);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }

    /// Writes `pvalues.csv`, `curves.csv`, `mk.csv` and `report.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("pvalues.csv"), self.pvalues_csv())?;
        std::fs::write(dir.join("curves.csv"), self.curves_csv())?;
        std::fs::write(dir.join("mk.csv"), self.mk_csv())?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        Ok(())
    }
}

/// One row of `curves.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub test: String,
    pub k: Option<u64>,
    pub point: CurvePoint,
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<CurveRow>, HarnessError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "test,k,alpha,fraction,stderr")) => {}
        _ => {
            return Err(HarnessError::Csv {
                line: 1,
                reason: "unexpected header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |reason: String| HarnessError::Csv { line: i + 1, reason };
            let cells: Vec<&str> = line.split(',').collect();
            let [test, k, alpha, fraction, stderr] = cells[..] else {
                return Err(bad(format!("expected 5 cells, found {}", cells.len())));
            };
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
            Ok(CurveRow {
                test: test.to_string(),
                k: if k.is_empty() {
                    None
                } else {
                    Some(k.parse().map_err(|e| bad(format!("`{k}`: {e}")))?)
                },
                point: CurvePoint {
                    alpha: num(alpha)?,
                    fraction: num(fraction)?,
                    stderr: num(stderr)?,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::Source;

    fn config(corruption: Corruption, reps: u64) -> ExperimentConfig {
        let generator = GeneratorSpec {
            source: Source::Uniform { d: 20 },
            n: 60,
            corruption,
            seed: 0,
        };
        let tests = ["even", "count:2", "logcurv:2"]
            .iter()
            .map(|t| TestSpec {
                test: t.parse().unwrap(),
                options: TestOptions::default(),
            })
            .collect();
        ExperimentConfig {
            reps,
            seed: 11,
            ..ExperimentConfig::new(generator, tests)
        }
    }

    #[test]
    fn curve_examples() {
        let c = rejection_curve(&[0.5], &[0.05, 0.9]).unwrap();
        assert_eq!((c[0].fraction, c[1].fraction), (0.0, 1.0));
        let ones = rejection_curve(&[1.0; 10], &[0.1, 0.99]).unwrap();
        assert!(ones.iter().all(|p| p.fraction == 0.0));
        let uniform: Vec<f64> = (1..=100).map(|k| k as f64 / 100.0).collect();
        let c = rejection_curve(&uniform, &[0.05]).unwrap();
        assert!((c[0].fraction - 0.05).abs() < 1e-15);
        assert!((c[0].stderr - (0.05f64 * 0.95 / 100.0).sqrt()).abs() < 1e-15);
        assert!(rejection_curve(&[], &[0.5]).is_err());
    }

    #[test]
    fn single_repetition() {
        let report = run_experiment(&config(Corruption::None, 1)).unwrap();
        assert_eq!(report.series.len(), 5);
        for s in &report.series {
            assert_eq!(s.pvalues.len(), 1);
            assert!(s.curve.iter().all(|c| c.fraction == 0.0 || c.fraction == 1.0));
        }
    }

    #[test]
    fn duplicated_data_rejects_even() {
        let mut big = config(Corruption::EvenN, 20);
        big.generator.source = Source::Uniform { d: 100 };
        big.generator.n = 1000;
        let strong = run_experiment(&big).unwrap();
        assert_eq!(strong.series("even").unwrap().headline.fraction, 1.0);

        let report = run_experiment(&config(Corruption::EvenN, 50)).unwrap();
        assert!(report.mk.iter().filter(|r| r.k % 2 == 1).all(|r| r.sample_m == 0 && r.avg_m == 0.0));
        let k1 = &report.mk[0];
        assert!((k1.expected_m - 60.0 * (19.0f64 / 20.0).powi(59)).abs() < 1e-9);
    }

    #[test]
    fn worker_count_does_not_matter() {
        let one = run_experiment(&ExperimentConfig {
            workers: Some(1),
            ..config(Corruption::None, 64)
        })
        .unwrap();
        let four = run_experiment(&ExperimentConfig {
            workers: Some(4),
            ..config(Corruption::None, 64)
        })
        .unwrap();
        assert_eq!(one.pvalues_csv(), four.pvalues_csv());
        assert_eq!(one.curves_csv(), four.curves_csv());
        assert_eq!(one.mk_csv(), four.mk_csv());
    }

    #[test]
    fn csv_headers_and_round_trip() {
        let report = run_experiment(&config(Corruption::EvenN, 20)).unwrap();
        let curves = report.curves_csv();
        assert!(curves.starts_with("test,k,alpha,fraction,stderr\n"));
        assert!(report.pvalues_csv().starts_with("rep,test,k,p\n"));
        assert!(report.mk_csv().starts_with("k,sample_m,avg_m,expected_m\n"));
        let rows = parse_curves_csv(&curves).unwrap();
        let flat: Vec<CurveRow> = report
            .series
            .iter()
            .flat_map(|s| {
                s.curve.iter().map(|&point| CurveRow {
                    test: s.test.clone(),
                    k: s.k,
                    point,
                })
            })
            .collect();
        assert_eq!(rows, flat);
        let back: ExperimentReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(Corruption::None, 0);
        assert!(cfg.validate().is_err());
        cfg.reps = 5;
        cfg.alpha_grid = vec![0.1, 0.05];
        assert!(cfg.validate().is_err());
        cfg.alpha_grid = vec![0.0, 0.5];
        assert!(cfg.validate().is_err());
        cfg.alpha_grid = vec![0.05];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_json_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"generator":{"kind":"uniform","d":100,"n":1000,"corruption":"even_n"},
                "tests":[{"test":"even"},{"test":"count:2","mode":"multinomial","cn_correction":true}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.reps, 2_000);
        assert_eq!(cfg.alpha_star, 0.05);
        assert_eq!(cfg.tests[1].options.mode, crate::iid_tests::BoundMode::Multinomial);
        assert!(cfg.tests[1].options.cn_correction);
        assert!(ExperimentConfig::from_json(r#"{"tests":[]}"#).is_err());
    }

    #[test]
    fn validity_outcome_flags_failures() {
        let mut cfg = config(Corruption::EvenN, 30);
        cfg.validity = Some(ValidityCheck { alpha: 0.05, sigmas: 3.0 });
        let report = run_experiment(&cfg).unwrap();
        let outcome = report.validity.unwrap();
        assert!(!outcome.passed());
        assert!(outcome.failures.contains(&"even".to_string()));
    }
}
