//! Synthetic iid and exchangeable non-iid data sources.
//!
//! Every generator returns only the counts of a sample, since all tests are
//! functions of the count profile. Corruptions change the sample while
//! keeping it exchangeable, which is exactly the situation the tests are
//! designed to detect.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::log_binomial_unchecked;
use crate::profile::CountProfile;

/// Distinct faces in a standard deck.
pub const FACES: u64 = 52;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error("support size d must be at least 1")]
    EmptySupport,
    #[error("deck count must be at least 1")]
    NoDecks,
    #[error("{corruption} needs an even sample size, got n = {n}")]
    OddSampleSize { corruption: Corruption, n: u64 },
    #[error("{corruption} needs n >= {needed}, got n = {n}")]
    SampleTooSmall {
        corruption: Corruption,
        n: u64,
        needed: u64,
    },
    #[error("cannot draw {n} cards from {decks} deck(s) of 52")]
    DeckExhausted { n: u64, decks: u64 },
    #[error("card draws do not support corruption {0}")]
    CorruptedCards(Corruption),
    #[error("invalid probability vector: {0}")]
    InvalidTheta(String),
}

/// How a sample is made non-iid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    #[default]
    None,
    /// Draw n/2 items and duplicate each one.
    EvenN,
    /// Draw n/2 items and add a copy under fresh labels, so every m_k is even.
    EvenM,
    /// Draw n−d items and add every label once.
    NoEmpty,
    /// Draw n−2d items and add every label twice.
    NoUnique,
}

impl std::fmt::Display for Corruption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Corruption::None => "none",
            Corruption::EvenN => "even_n",
            Corruption::EvenM => "even_m",
            Corruption::NoEmpty => "no_empty",
            Corruption::NoUnique => "no_unique",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Source {
    /// `θ_x = 1/d`.
    Uniform { d: u64 },
    /// `θ_x = 2x/(d(d+1))`.
    Linear { d: u64 },
    /// Draws without replacement from `decks` shuffled 52-card decks.
    Cards { decks: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub source: Source,
    pub n: u64,
    #[serde(default)]
    pub corruption: Corruption,
    #[serde(default)]
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let (n, corruption) = (self.n, self.corruption);
        match self.source {
            Source::Cards { decks } => {
                if decks == 0 {
                    return Err(GeneratorError::NoDecks);
                }
                if corruption != Corruption::None {
                    return Err(GeneratorError::CorruptedCards(corruption));
                }
                if n > FACES.saturating_mul(decks) {
                    return Err(GeneratorError::DeckExhausted { n, decks });
                }
            }
            Source::Uniform { d } | Source::Linear { d } => {
                if d == 0 {
                    return Err(GeneratorError::EmptySupport);
                }
                let needed = match corruption {
                    Corruption::EvenN | Corruption::EvenM if n % 2 == 1 => {
                        return Err(GeneratorError::OddSampleSize { corruption, n });
                    }
                    Corruption::NoEmpty => d,
                    Corruption::NoUnique => d.saturating_mul(2),
                    _ => 0,
                };
                if n < needed {
                    return Err(GeneratorError::SampleTooSmall { corruption, n, needed });
                }
            }
        }
        Ok(())
    }

    /// The uncorrupted iid distribution, if the source has one.
    pub fn theta(&self) -> Option<Vec<f64>> {
        match self.source {
            Source::Uniform { d } => Some(make_theta(ThetaShape::Uniform, d).ok()?),
            Source::Linear { d } => Some(make_theta(ThetaShape::Linear, d).ok()?),
            Source::Cards { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaShape {
    Uniform,
    Linear,
}

pub fn make_theta(shape: ThetaShape, d: u64) -> Result<Vec<f64>, GeneratorError> {
    if d == 0 {
        return Err(GeneratorError::EmptySupport);
    }
    let df = d as f64;
    Ok(match shape {
        ThetaShape::Uniform => vec![1.0 / df; d as usize],
        ThetaShape::Linear => {
            let total = df * (df + 1.0);
            (1..=d).map(|x| 2.0 * x as f64 / total).collect()
        }
    })
}

/// A validated spec with its sampling tables built once.
#[derive(Debug, Clone)]
pub struct Sampler {
    spec: GeneratorSpec,
    cumulative: Vec<f64>,
}

impl Sampler {
    pub fn new(spec: GeneratorSpec) -> Result<Self, GeneratorError> {
        spec.validate()?;
        let cumulative = match spec.source {
            Source::Linear { d } => {
                let theta = make_theta(ThetaShape::Linear, d)?;
                let mut acc = 0.0;
                theta
                    .iter()
                    .map(|t| {
                        acc += t;
                        acc
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        Ok(Sampler { spec, cumulative })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn draw_label<R: Rng>(&self, rng: &mut R, d: u64) -> usize {
        if self.cumulative.is_empty() {
            return rng.random_range(0..d) as usize;
        }
        let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }

    fn draw_iid<R: Rng>(&self, rng: &mut R, d: u64, draws: u64, counts: &mut [u64]) {
        for _ in 0..draws {
            counts[self.draw_label(rng, d)] += 1;
        }
    }

    /// Draws one sample's counts.
    pub fn sample_with<R: Rng>(&self, rng: &mut R) -> CountProfile {
        let n = self.spec.n;
        let counts = match self.spec.source {
            Source::Cards { decks } => draw_cards(rng, decks, n),
            Source::Uniform { d } | Source::Linear { d } => {
                let mut counts = vec![0u64; d as usize];
                match self.spec.corruption {
                    Corruption::None => self.draw_iid(rng, d, n, &mut counts),
                    Corruption::EvenN => {
                        self.draw_iid(rng, d, n / 2, &mut counts);
                        counts.iter_mut().for_each(|c| *c *= 2);
                    }
                    Corruption::EvenM => {
                        self.draw_iid(rng, d, n / 2, &mut counts);
                        counts.extend_from_within(..);
                    }
                    Corruption::NoEmpty => {
                        self.draw_iid(rng, d, n - d, &mut counts);
                        counts.iter_mut().for_each(|c| *c += 1);
                    }
                    Corruption::NoUnique => {
                        self.draw_iid(rng, d, n - 2 * d, &mut counts);
                        counts.iter_mut().for_each(|c| *c += 2);
                    }
                }
                counts
            }
        };
        let observed: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
        CountProfile::from_counts(observed).expect("zero counts were filtered")
    }
}

/// Partial Fisher–Yates over the full pile; only face identity is counted.
fn draw_cards<R: Rng>(rng: &mut R, decks: u64, n: u64) -> Vec<u64> {
    let size = (FACES * decks) as usize;
    let mut pile: Vec<u32> = (0..size as u32).collect();
    let mut counts = vec![0u64; FACES as usize];
    for i in 0..n as usize {
        let j = rng.random_range(i..size);
        pile.swap(i, j);
        counts[(pile[i] as u64 % FACES) as usize] += 1;
    }
    counts
}

/// Samples the spec using its own seed.
pub fn sample(spec: &GeneratorSpec) -> Result<CountProfile, GeneratorError> {
    let sampler = Sampler::new(*spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(sampler.sample_with(&mut rng))
}

fn validate_theta(theta: &[f64]) -> Result<(), GeneratorError> {
    if theta.is_empty() {
        return Err(GeneratorError::InvalidTheta("empty".into()));
    }
    if let Some(bad) = theta.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(GeneratorError::InvalidTheta(format!("entry {bad} outside [0, 1]")));
    }
    let total: f64 = theta.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(GeneratorError::InvalidTheta(format!("sums to {total}")));
    }
    Ok(())
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `E[M_k] = Σ_x f_k^n(θ_x)` for `k = 1..=k_max`.
pub fn expected_mk(theta: &[f64], n: u64, k_max: u64) -> Result<Vec<f64>, GeneratorError> {
    validate_theta(theta)?;
    Ok((1..=k_max)
        .map(|k| {
            if k > n {
                return 0.0;
            }
            log_sum_exp(theta.iter().map(|&t| log_binomial_unchecked(k, n, t))).exp()
        })
        .collect())
}

fn ln_choose(a: u64, b: u64) -> f64 {
    let lg = |x: u64| libm::lgamma(x as f64 + 1.0);
    lg(a) - lg(b) - lg(a - b)
}

/// `E[M_k]` for the uncorrupted spec: multinomial for iid sources,
/// hypergeometric (52 faces, `decks` copies each) for cards.
pub fn expected_mk_for(spec: &GeneratorSpec, k_max: u64) -> Result<Vec<f64>, GeneratorError> {
    spec.validate()?;
    match spec.source {
        Source::Cards { decks } => {
            let (pile, n) = (FACES * decks, spec.n);
            Ok((1..=k_max)
                .map(|k| {
                    if k > decks || k > n || n - k > pile - decks {
                        return 0.0;
                    }
                    let log_p = ln_choose(decks, k) + ln_choose(pile - decks, n - k)
                        - ln_choose(pile, n);
                    FACES as f64 * log_p.exp()
                })
                .collect())
        }
        _ => expected_mk(&spec.theta().expect("iid source"), spec.n, k_max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(source: Source, n: u64, corruption: Corruption, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            source,
            n,
            corruption,
            seed,
        }
    }

    #[test]
    fn theta_shapes() {
        assert_eq!(make_theta(ThetaShape::Uniform, 4).unwrap(), vec![0.25; 4]);
        let lin = make_theta(ThetaShape::Linear, 3).unwrap();
        for (got, want) in lin.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(make_theta(ThetaShape::Linear, 1).unwrap(), vec![1.0]);
        let big: f64 = make_theta(ThetaShape::Linear, 1000).unwrap().iter().sum();
        assert!((big - 1.0).abs() < 1e-12);
        assert_eq!(make_theta(ThetaShape::Uniform, 0), Err(GeneratorError::EmptySupport));
    }

    #[test]
    fn spec_validation() {
        let bad = [
            spec(Source::Uniform { d: 0 }, 10, Corruption::None, 0),
            spec(Source::Uniform { d: 5 }, 11, Corruption::EvenN, 0),
            spec(Source::Uniform { d: 5 }, 11, Corruption::EvenM, 0),
            spec(Source::Uniform { d: 5 }, 4, Corruption::NoEmpty, 0),
            spec(Source::Uniform { d: 5 }, 9, Corruption::NoUnique, 0),
            spec(Source::Cards { decks: 1 }, 53, Corruption::None, 0),
            spec(Source::Cards { decks: 1 }, 10, Corruption::EvenN, 0),
            spec(Source::Cards { decks: 0 }, 0, Corruption::None, 0),
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
            assert!(sample(&s).is_err());
        }
        assert!(spec(Source::Uniform { d: 5 }, 10, Corruption::NoUnique, 0).validate().is_ok());
    }

    #[test]
    fn corruptions_shape_the_profile() {
        let even = sample(&spec(Source::Uniform { d: 50 }, 200, Corruption::EvenN, 3)).unwrap();
        assert_eq!(even.n(), 200);
        assert!(even.multiplicities().keys().all(|k| k % 2 == 0));

        let even_m = sample(&spec(Source::Uniform { d: 10 }, 40, Corruption::EvenM, 4)).unwrap();
        assert_eq!(even_m.n(), 40);
        assert!(even_m.multiplicities().values().all(|m| m % 2 == 0));

        let no_unique =
            sample(&spec(Source::Uniform { d: 5 }, 20, Corruption::NoUnique, 5)).unwrap();
        assert_eq!(no_unique.m(1), 0);
        assert_eq!(no_unique.m_plus(), 5);
        assert!(no_unique.multiplicities().keys().all(|&k| k >= 2));

        let no_empty = sample(&spec(Source::Linear { d: 30 }, 40, Corruption::NoEmpty, 6)).unwrap();
        assert_eq!(no_empty.m_plus(), 30);
        assert_eq!(no_empty.n(), 40);
    }

    #[test]
    fn cards_exhaust_the_pile() {
        let full = sample(&spec(Source::Cards { decks: 2 }, 104, Corruption::None, 9)).unwrap();
        assert_eq!(full.multiplicities().iter().collect::<Vec<_>>(), vec![(&2, &52)]);
        for seed in 0..50 {
            let p = sample(&spec(Source::Cards { decks: 3 }, 80, Corruption::None, seed)).unwrap();
            assert!(p.max_count() <= 3);
            assert_eq!(p.n(), 80);
        }
    }

    #[test]
    fn seeds_are_reproducible() {
        let s = spec(Source::Linear { d: 40 }, 500, Corruption::None, 42);
        assert_eq!(sample(&s).unwrap(), sample(&s).unwrap());
        let other = GeneratorSpec { seed: 43, ..s };
        assert_ne!(sample(&s).unwrap(), sample(&other).unwrap());
    }

    #[test]
    fn expected_mk_examples() {
        let e = expected_mk(&[0.5, 0.5], 2, 2).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15);
        assert!((e[1] - 0.5).abs() < 1e-15);
        let det = expected_mk(&[1.0], 5, 6).unwrap();
        assert_eq!(det, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(expected_mk(&[0.5, 0.4], 5, 3).is_err());
        assert!(expected_mk(&[], 5, 3).is_err());
    }

    #[test]
    fn card_expectation_sums_to_n() {
        let s = spec(Source::Cards { decks: 2 }, 65, Corruption::None, 0);
        let e = expected_mk_for(&s, 4).unwrap();
        let total: f64 = e.iter().enumerate().map(|(i, m)| (i + 1) as f64 * m).sum();
        assert!((total - 65.0).abs() < 1e-9);
        assert_eq!(e[2], 0.0);
    }

    #[test]
    fn spec_json_shape() {
        let s = spec(Source::Cards { decks: 2 }, 65, Corruption::None, 7);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"kind":"cards","decks":2,"n":65,"corruption":"none","seed":7}"#);
        let parsed: GeneratorSpec =
            serde_json::from_str(r#"{"kind":"uniform","d":100,"n":1000,"corruption":"even_n"}"#)
                .unwrap();
        assert_eq!(parsed.corruption, Corruption::EvenN);
        assert_eq!(parsed.seed, 0);
    }
}
