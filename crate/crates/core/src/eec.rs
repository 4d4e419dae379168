//! Extreme-error-correcting ABFT: detection, location and correction of
//! INF, NaN and near-INF values in a checksum-protected vector, and the
//! matrix-level procedures built on it.
//!
//! A vector is checked by recomputing its two checksums and comparing with
//! the stored ones (`delta1 = csum - sum`, `delta2 = wsum - wsum'`). The class
//! of `delta1` selects the handling:
//!
//! * finite: count near-INF entries; locate with `round(delta2 / delta1) - 1`
//!   when `delta2` is finite, else by the largest magnitude; repair by adding
//!   `delta1` for small values, by reconstruction from the checksum otherwise.
//! * `±INF`: locate by the largest magnitude and reconstruct.
//! * NaN: locate the first NaN (then INF, then largest magnitude) and
//!   reconstruct.
//!
//! In every case more than one suspicious entry means the error has spread
//! along the vector; the vector is left untouched and propagation reported.

use serde::{Deserialize, Serialize};

use crate::checksum::{vector_checksums, Axis, EncodedMatrix};
use crate::error::{AbftError, Result};
use crate::flops;
use crate::numerics::{classify_value, FloatClass};
use crate::serde_float::f32_lossless;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EecConfig {
    /// Roundoff threshold `E` on `|delta1|`.
    pub roundoff: f32,
    /// Magnitude above which a finite value counts as near-INF.
    pub near_inf: f32,
    /// Values above this magnitude are reconstructed rather than adjusted.
    pub correct: f32,
}

impl EecConfig {
    pub const DEFAULT_NEAR_INF: f32 = 1e10;
    pub const DEFAULT_CORRECT: f32 = 1e5;

    pub fn new(roundoff: f32, near_inf: f32, correct: f32) -> Result<Self> {
        let cfg = Self {
            roundoff,
            near_inf,
            correct,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default thresholds with the given roundoff.
    pub fn with_roundoff(roundoff: f32) -> Self {
        Self {
            roundoff,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.roundoff && self.roundoff < self.correct && self.correct < self.near_inf {
            Ok(())
        } else {
            Err(AbftError::InvalidConfig(format!(
                "need 0 < E < T_correct < T_nearINF, got E={}, T_correct={}, T_nearINF={}",
                self.roundoff, self.correct, self.near_inf
            )))
        }
    }
}

impl Default for EecConfig {
    fn default() -> Self {
        Self {
            roundoff: 1e-4,
            near_inf: Self::DEFAULT_NEAR_INF,
            correct: Self::DEFAULT_CORRECT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrectionStrategy {
    DeltaAdjust,
    Reconstruct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub index: usize,
    #[serde(with = "f32_lossless")]
    pub old_value: f32,
    #[serde(with = "f32_lossless")]
    pub new_value: f32,
    /// Class of the corrupted value before repair.
    pub class: FloatClass,
    pub strategy: CorrectionStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UncorrectableReason {
    /// The repaired value would itself be non-finite; other entries are bad.
    ReconstructionNonFinite,
    /// `delta1` is non-finite but the data holds no extreme value, so the
    /// stored checksum is what got corrupted.
    ChecksumCorrupted,
    /// A second pass could not explain what the first one flagged.
    Inconsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Clean,
    Corrected(Correction),
    PropagationDetected { suspect_count: usize },
    Uncorrectable { reason: UncorrectableReason },
}

impl Verdict {
    pub fn is_clean(&self) -> bool {
        matches!(self, Verdict::Clean)
    }

    /// Propagation or uncorrectable: the vector still needs attention.
    pub fn is_failure(&self) -> bool {
        matches!(
            self,
            Verdict::PropagationDetected { .. } | Verdict::Uncorrectable { .. }
        )
    }
}

/// Entries that could be the corrupted one, given how `delta1` looks.
pub fn count_suspects(v: &[f32], delta1_class: FloatClass, cfg: &EecConfig) -> usize {
    v.iter()
        .filter(|&&x| {
            let c = classify_value(x, cfg.near_inf);
            match delta1_class {
                FloatClass::Finite | FloatClass::NearInf => c == FloatClass::NearInf,
                FloatClass::Inf => matches!(c, FloatClass::Inf | FloatClass::NearInf),
                FloatClass::NaN => c != FloatClass::Finite,
            }
        })
        .count()
}

/// Index of the largest `|x|`, lowest index on ties. NaN entries are skipped.
fn argmax_abs(v: &[f32]) -> usize {
    let mut best = 0;
    let mut best_abs = f32::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best = i;
            best_abs = x.abs();
        }
    }
    best
}

fn locate_by_ratio(delta1: f32, delta2: f32, n: usize) -> Option<usize> {
    let r = (delta2 / delta1).round();
    (r.is_finite() && r >= 1.0 && r <= n as f32).then(|| r as usize - 1)
}

fn reconstruct(v: &[f32], idx: usize, csum: f32) -> f32 {
    let mut others = 0.0f32;
    for (j, &x) in v.iter().enumerate() {
        if j != idx {
            others += x;
        }
    }
    flops::add(v.len() as u64);
    csum - others
}

/// Checks `v` against its stored checksums and repairs it in place when a
/// single corrupted entry can be identified.
///
/// `v` is only modified when the verdict is [`Verdict::Corrected`].
pub fn detect_and_correct_vector(v: &mut [f32], csum: f32, wsum: f32, cfg: &EecConfig) -> Verdict {
    let (sum, wsum_fresh) = vector_checksums(v);
    let delta1 = csum - sum;
    let delta2 = wsum - wsum_fresh;
    flops::add(2);
    if delta1.abs() <= cfg.roundoff {
        return Verdict::Clean;
    }

    let delta_class = classify_value(delta1, f32::INFINITY);
    let suspects = count_suspects(v, delta_class, cfg);
    if suspects > 1 {
        return Verdict::PropagationDetected {
            suspect_count: suspects,
        };
    }

    let (idx, force_reconstruct) = match delta_class {
        FloatClass::Finite | FloatClass::NearInf => {
            let idx = if delta2.is_finite() {
                locate_by_ratio(delta1, delta2, v.len()).unwrap_or_else(|| argmax_abs(v))
            } else {
                argmax_abs(v)
            };
            (idx, false)
        }
        FloatClass::Inf => {
            if suspects == 0 {
                return Verdict::Uncorrectable {
                    reason: UncorrectableReason::ChecksumCorrupted,
                };
            }
            (argmax_abs(v), true)
        }
        FloatClass::NaN => {
            if suspects == 0 {
                return Verdict::Uncorrectable {
                    reason: UncorrectableReason::ChecksumCorrupted,
                };
            }
            let idx = v
                .iter()
                .position(|x| x.is_nan())
                .or_else(|| v.iter().position(|x| x.is_infinite()))
                .unwrap_or_else(|| argmax_abs(v));
            (idx, true)
        }
    };

    let old = v[idx];
    let (new, strategy) = if !force_reconstruct && old.abs() <= cfg.correct {
        flops::add(1);
        (old + delta1, CorrectionStrategy::DeltaAdjust)
    } else {
        (reconstruct(v, idx, csum), CorrectionStrategy::Reconstruct)
    };
    if !new.is_finite() {
        return Verdict::Uncorrectable {
            reason: UncorrectableReason::ReconstructionNonFinite,
        };
    }
    v[idx] = new;
    Verdict::Corrected(Correction {
        index: idx,
        old_value: old,
        new_value: new,
        class: classify_value(old, cfg.near_inf),
        strategy,
    })
}

/// Verdicts for every vector along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassLog {
    pub axis: Axis,
    pub verdicts: Vec<Verdict>,
}

impl PassLog {
    pub fn corrected(&self) -> usize {
        self.verdicts
            .iter()
            .filter(|v| matches!(v, Verdict::Corrected(_)))
            .count()
    }

    pub fn failures(&self) -> usize {
        self.verdicts.iter().filter(|v| v.is_failure()).count()
    }

    pub fn all_clean(&self) -> bool {
        self.verdicts.iter().all(Verdict::is_clean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Clean,
    Corrected,
    Uncorrectable,
}

/// Outcome of correcting one matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionLog {
    pub tag: String,
    pub passes: Vec<PassLog>,
    /// Row indices whose row checksums disagreed after a clean column pass.
    pub false_negative_rows: Vec<usize>,
    /// Axes whose stored checksums were recomputed from the repaired data.
    pub refreshed: Vec<Axis>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub finite: usize,
    pub near_inf: usize,
    pub inf: usize,
    pub nan: usize,
}

impl CorrectionLog {
    /// Corrections across all passes by class of the replaced value.
    pub fn class_counts(&self) -> ClassCounts {
        let mut counts = ClassCounts::default();
        for v in self.passes.iter().flat_map(|p| &p.verdicts) {
            if let Verdict::Corrected(c) = v {
                match c.class {
                    FloatClass::Finite => counts.finite += 1,
                    FloatClass::NearInf => counts.near_inf += 1,
                    FloatClass::Inf => counts.inf += 1,
                    FloatClass::NaN => counts.nan += 1,
                }
            }
        }
        counts
    }

    pub fn corrections(&self) -> usize {
        self.passes.iter().map(PassLog::corrected).sum()
    }
}

fn correct_pass(m: &mut EncodedMatrix, axis: Axis, cfg: &EecConfig, op: &'static str, tag: &str) -> Result<PassLog> {
    let stored = m
        .checksums(axis)
        .ok_or_else(|| AbftError::MissingChecksum {
            op,
            tag: tag.to_string(),
            axis,
        })?
        .clone();
    let count = axis.vector_count(&m.matrix);
    if stored.len() != count {
        return Err(crate::error::shape_err(
            op,
            format!("{tag}: {} checksums for {count} vectors", stored.len()),
        ));
    }
    let mut verdicts = Vec::with_capacity(count);
    for idx in 0..count {
        let mut v = axis.vector(&m.matrix, idx);
        let verdict = detect_and_correct_vector(&mut v, stored.unweighted[idx], stored.weighted[idx], cfg);
        if let Verdict::Corrected(c) = &verdict {
            match axis {
                Axis::Column => m.matrix.set(c.index, idx, c.new_value),
                Axis::Row => m.matrix.set(idx, c.index, c.new_value),
            }
        }
        verdicts.push(verdict);
    }
    Ok(PassLog { axis, verdicts })
}

/// Corrects a matrix whose possible error pattern is known in advance: one
/// row (use column checksums) or one column (use row checksums).
pub fn correct_matrix_deterministic(
    m: &mut EncodedMatrix,
    axis: Axis,
    cfg: &EecConfig,
    tag: &str,
) -> Result<CorrectionLog> {
    let pass = correct_pass(m, axis, cfg, "correct_matrix_deterministic", tag)?;
    let mut refreshed = Vec::new();
    let outcome = if pass.failures() > 0 {
        Outcome::Uncorrectable
    } else if pass.corrected() > 0 {
        m.refresh(axis);
        refreshed.push(axis);
        Outcome::Corrected
    } else {
        Outcome::Clean
    };
    Ok(CorrectionLog {
        tag: tag.to_string(),
        passes: vec![pass],
        false_negative_rows: Vec::new(),
        refreshed,
        outcome,
    })
}

/// Corrects a matrix whose error may have spread along a row or a column.
///
/// Phase 1 uses the column checksums. If that pass reports propagation, or
/// passes clean while the row checksums still disagree (a column error that
/// also corrupted the column checksums), phase 2 corrects with the row
/// checksums and phase 3 recomputes the column checksums from the repaired
/// data.
pub fn correct_matrix_nondeterministic(m: &mut EncodedMatrix, cfg: &EecConfig, tag: &str) -> Result<CorrectionLog> {
    const OP: &str = "correct_matrix_nondeterministic";
    if m.row_checksums.is_none() {
        return Err(AbftError::MissingChecksum {
            op: OP,
            tag: tag.to_string(),
            axis: Axis::Row,
        });
    }
    let phase1 = correct_pass(m, Axis::Column, cfg, OP, tag)?;
    let mut log = CorrectionLog {
        tag: tag.to_string(),
        passes: Vec::new(),
        false_negative_rows: Vec::new(),
        refreshed: Vec::new(),
        outcome: Outcome::Clean,
    };

    let mut need_rows = phase1.failures() > 0;
    if phase1.all_clean() {
        log.false_negative_rows = m.delta(Axis::Row, OP, tag)?.violations(cfg.roundoff);
        need_rows = !log.false_negative_rows.is_empty();
    }
    let phase1_corrected = phase1.corrected();
    let only_bad_checksums = phase1.verdicts.iter().all(|v| {
        matches!(
            v,
            Verdict::Clean
                | Verdict::Uncorrectable {
                    reason: UncorrectableReason::ChecksumCorrupted
                }
        )
    });
    log.passes.push(phase1);

    if !need_rows {
        if phase1_corrected > 0 {
            // a row pattern may have been folded into the row checksums too
            m.refresh(Axis::Column);
            m.refresh(Axis::Row);
            log.refreshed = vec![Axis::Column, Axis::Row];
            log.outcome = Outcome::Corrected;
        }
        return Ok(log);
    }

    let phase2 = correct_pass(m, Axis::Row, cfg, OP, tag)?;
    let phase2_ok = phase2.failures() == 0;
    let phase2_corrected = phase2.corrected();
    log.passes.push(phase2);
    if !phase2_ok {
        log.outcome = Outcome::Uncorrectable;
        return Ok(log);
    }
    if phase2_corrected == 0 && !only_bad_checksums {
        let verdicts = &mut log.passes[1].verdicts;
        if let Some(first) = verdicts.first_mut() {
            *first = Verdict::Uncorrectable {
                reason: UncorrectableReason::Inconsistent,
            };
        }
        log.outcome = Outcome::Uncorrectable;
        return Ok(log);
    }
    m.refresh(Axis::Column);
    m.refresh(Axis::Row);
    log.refreshed = vec![Axis::Column, Axis::Row];
    log.outcome = Outcome::Corrected;
    Ok(log)
}
