//! Checksum-protected multi-head attention that detects and corrects INF,
//! NaN and near-INF soft errors in place, plus the tooling around it: fault
//! injection campaigns, propagation-pattern studies and a fault-coverage
//! model for choosing how often each protection section runs.

pub mod attention;
pub mod bench;
pub mod checksum;
pub mod coverage;
pub mod eec;
pub mod error;
pub mod fault;
pub mod flops;
pub mod numerics;
pub mod seed;
pub mod serde_float;

pub use checksum::{Axis, ChecksumDelta, ChecksumPair, EncodedMatrix};
pub use eec::{CorrectionLog, EecConfig, Verdict};
pub use error::{AbftError, Result};
pub use numerics::{BatchedMatrix, FloatClass, Matrix};
