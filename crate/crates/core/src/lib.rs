//! Testing the iid hypothesis from the multiplicities of item counts.

pub mod experiment;
pub mod generators;
pub mod numerics;
pub mod profile;
pub mod verify;

pub use iid_tests::{
    BoundMode, CombinedResult, PValueMethod, TestError, TestKind, TestOptions, TestResult,
    VarianceSource,
};
pub use profile::{CountProfile, IngestMode, ProfileDocument};
