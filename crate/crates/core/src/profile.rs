//! Count profiles: the sample size together with the second-order count
//! multiplicities `m_k = #{x : n_x = k}`, optionally with the first-order
//! counts they were derived from.
//!
//! `m_0` is never stored; for an infinite sample space it is not a usable
//! statistic.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("count at position {index} is zero; every count must be positive")]
    ZeroCount { index: usize },
    #[error("invalid profile: {0}")]
    Invalid(ProfileViolation),
}

/// The first invariant a profile document breaks.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileViolation {
    #[error("m_0 is not representable")]
    ZeroMultiplicityKey,
    #[error("m_{k} = 0 stored explicitly")]
    ZeroMultiplicity { k: u64 },
    #[error("Σ k·m_k = {sum} ≠ n = {n}")]
    SizeMismatch { sum: u64, n: u64 },
    #[error("first_order inconsistent: {0}")]
    FirstOrderInconsistent(String),
    #[error("Σ k·m_k overflows")]
    Overflow,
}

/// How `ingest_items` tells items apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IngestMode {
    /// Exact byte-string keys.
    #[default]
    Exact,
    /// Keys are the first 128 bits of SHA-256. Collisions silently merge
    /// distinct items, which biases the profile toward higher multiplicities.
    Hashed128,
}

/// Serialized form of a profile (`{"n":..,"m":{"k":m_k},"counts":[..]}`); not
/// validated until converted into a [`CountProfile`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileDocument {
    pub n: u64,
    pub m: BTreeMap<u64, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<u64>>,
}

impl ProfileDocument {
    /// Returns the first violated invariant, if any.
    pub fn validate(&self) -> Result<(), ProfileViolation> {
        let mut sum: u64 = 0;
        for (&k, &mk) in &self.m {
            if k == 0 {
                return Err(ProfileViolation::ZeroMultiplicityKey);
            }
            if mk == 0 {
                return Err(ProfileViolation::ZeroMultiplicity { k });
            }
            sum = k
                .checked_mul(mk)
                .and_then(|t| sum.checked_add(t))
                .ok_or(ProfileViolation::Overflow)?;
        }
        if sum != self.n {
            return Err(ProfileViolation::SizeMismatch { sum, n: self.n });
        }
        if let Some(counts) = &self.counts {
            if let Some(i) = counts.iter().position(|&c| c == 0) {
                return Err(ProfileViolation::FirstOrderInconsistent(format!(
                    "label {} has count 0",
                    i + 1
                )));
            }
            if multiplicities_of(counts) != self.m {
                return Err(ProfileViolation::FirstOrderInconsistent(
                    "multiplicities differ from those of the counts".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("profile document serializes")
    }
}

/// Validated sufficient statistic for invariant tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountProfile {
    n: u64,
    first_order: Option<Vec<u64>>,
    multiplicities: BTreeMap<u64, u64>,
    m_plus: u64,
}

fn multiplicities_of(counts: &[u64]) -> BTreeMap<u64, u64> {
    let mut m = BTreeMap::new();
    for &c in counts {
        *m.entry(c).or_insert(0) += 1;
    }
    m
}

impl CountProfile {
    pub fn empty() -> Self {
        CountProfile {
            n: 0,
            first_order: None,
            multiplicities: BTreeMap::new(),
            m_plus: 0,
        }
    }

    /// Builds a profile from first-order counts; labels are implicitly `1..=len`.
    pub fn from_counts(counts: Vec<u64>) -> Result<Self, ProfileError> {
        if let Some(index) = counts.iter().position(|&c| c == 0) {
            return Err(ProfileError::ZeroCount { index });
        }
        let multiplicities = multiplicities_of(&counts);
        let n = counts.iter().sum();
        Ok(CountProfile {
            n,
            m_plus: counts.len() as u64,
            first_order: Some(counts),
            multiplicities,
        })
    }

    /// Builds a profile from multiplicities alone.
    pub fn from_multiplicities(
        m: impl IntoIterator<Item = (u64, u64)>,
    ) -> Result<Self, ProfileError> {
        let mut multiplicities = BTreeMap::new();
        for (k, mk) in m {
            if mk > 0 {
                *multiplicities.entry(k).or_insert(0) += mk;
            }
        }
        let n = multiplicities
            .iter()
            .try_fold(0u64, |acc, (&k, &mk)| acc.checked_add(k.checked_mul(mk)?))
            .ok_or(ProfileError::Invalid(ProfileViolation::Overflow))?;
        Self::try_from(ProfileDocument {
            n,
            m: multiplicities,
            counts: None,
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// `m_k`; zero for absent keys, including `k = 0`.
    pub fn m(&self, k: u64) -> u64 {
        if k == 0 {
            return 0;
        }
        self.multiplicities.get(&k).copied().unwrap_or(0)
    }

    pub fn multiplicities(&self) -> &BTreeMap<u64, u64> {
        &self.multiplicities
    }

    /// Number of distinct observed items.
    pub fn m_plus(&self) -> u64 {
        self.m_plus
    }

    pub fn first_order(&self) -> Option<&[u64]> {
        self.first_order.as_deref()
    }

    /// Largest observed count, 0 for an empty profile.
    pub fn max_count(&self) -> u64 {
        self.multiplicities.keys().next_back().copied().unwrap_or(0)
    }

    /// Same profile with the first-order counts dropped.
    pub fn without_first_order(&self) -> Self {
        CountProfile {
            first_order: None,
            ..self.clone()
        }
    }

    pub fn to_document(&self, with_counts: bool) -> ProfileDocument {
        ProfileDocument {
            n: self.n,
            m: self.multiplicities.clone(),
            counts: if with_counts {
                self.first_order.clone()
            } else {
                None
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileLoadError> {
        let doc: ProfileDocument = serde_json::from_str(text)?;
        Ok(Self::try_from(doc)?)
    }
}

impl TryFrom<ProfileDocument> for CountProfile {
    type Error = ProfileError;

    fn try_from(doc: ProfileDocument) -> Result<Self, Self::Error> {
        doc.validate().map_err(ProfileError::Invalid)?;
        let m_plus = doc.m.values().sum();
        Ok(CountProfile {
            n: doc.n,
            first_order: doc.counts,
            multiplicities: doc.m,
            m_plus,
        })
    }
}

#[derive(Debug, Error)]
pub enum ProfileLoadError {
    #[error("malformed profile document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Counts the distinct items of a finite stream. Labels are dense integers
/// assigned in order of first appearance.
pub fn ingest_items<I, T>(items: I) -> CountProfile
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    ingest_items_with(items, IngestMode::Exact)
}

pub fn ingest_items_with<I, T>(items: I, mode: IngestMode) -> CountProfile
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    let mut counts: Vec<u64> = Vec::new();
    match mode {
        IngestMode::Exact => {
            let mut labels: HashMap<Vec<u8>, usize> = HashMap::new();
            for item in items {
                let bytes = item.as_ref();
                match labels.get(bytes) {
                    Some(&label) => counts[label] += 1,
                    None => {
                        labels.insert(bytes.to_vec(), counts.len());
                        counts.push(1);
                    }
                }
            }
        }
        IngestMode::Hashed128 => {
            let mut labels: HashMap<u128, usize> = HashMap::new();
            for item in items {
                let digest = Sha256::digest(item.as_ref());
                let mut key = [0u8; 16];
                key.copy_from_slice(&digest[..16]);
                let label = *labels.entry(u128::from_le_bytes(key)).or_insert_with(|| {
                    counts.push(0);
                    counts.len() - 1
                });
                counts[label] += 1;
            }
        }
    }
    CountProfile::from_counts(counts).expect("ingested counts are positive")
}

/// Reads newline-delimited items. Bytes between delimiters are taken
/// verbatim; a single trailing `\n` does not start an extra empty item.
pub fn ingest_lines<R: BufRead>(mut reader: R, mode: IngestMode) -> std::io::Result<CountProfile> {
    let mut items = Vec::new();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let read = reader.read_until(b'\n', &mut buf)?;
        if read == 0 {
            break;
        }
        if buf.last() == Some(&b'\n') {
            buf.pop();
        }
        items.push(std::mem::take(&mut buf));
    }
    Ok(ingest_items_with(items, mode))
}
