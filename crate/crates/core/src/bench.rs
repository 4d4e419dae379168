//! Wall-clock comparison of protected and plain forward passes, with the
//! checksum work each section actually did next to the analytic cost model.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{forward_protected, forward_unprotected, section_cost, Dims, ProtectionConfig, SectionId};
use crate::error::{AbftError, Result};
use crate::fault::model_for_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub samples: usize,
    pub median_s: f64,
    pub mean_s: f64,
    pub variance_s2: f64,
    pub min_s: f64,
    pub max_s: f64,
}

impl TimingStats {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let variance = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            samples: xs.len(),
            median_s: median(xs),
            mean_s: mean,
            variance_s2: variance,
            min_s: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max_s: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionCostReport {
    pub section: SectionId,
    pub instrumented_flops: u64,
    pub model_flops: u64,
    /// model / instrumented
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub dims: Dims,
    pub reps: usize,
    pub seed: u64,
    pub unprotected: TimingStats,
    pub protected: TimingStats,
    /// median protected / median unprotected
    pub ratio: f64,
    /// Spread of the per-repetition ratios.
    pub ratio_mean: f64,
    pub ratio_variance: f64,
    pub sections: Vec<SectionCostReport>,
}

/// Times `reps` paired runs of the plain and fully protected forward on a
/// seeded model. Detection runs in every section.
pub fn bench_forward(dims: &Dims, reps: usize, seed: u64) -> Result<BenchReport> {
    if reps == 0 {
        return Err(AbftError::InvalidConfig("bench needs at least one repetition".into()));
    }
    let (params, x) = model_for_seed(dims, seed)?;
    let config = ProtectionConfig {
        seed,
        ..ProtectionConfig::default()
    };

    // warm-up, and the flop counts (identical on every clean run)
    forward_unprotected(&x, &params)?;
    let (_, trace) = forward_protected(&x, &params, &config)?;
    let sections = SectionId::ALL
        .iter()
        .map(|&id| {
            let instrumented = trace.section(id).flops;
            let model = section_cost(id, dims);
            SectionCostReport {
                section: id,
                instrumented_flops: instrumented,
                model_flops: model,
                ratio: model as f64 / instrumented.max(1) as f64,
            }
        })
        .collect();

    let mut plain = Vec::with_capacity(reps);
    let mut protected = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(forward_unprotected(&x, &params)?);
        plain.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        std::hint::black_box(forward_protected(&x, &params, &config)?);
        protected.push(t.elapsed().as_secs_f64());
    }
    let ratios: Vec<f64> = protected.iter().zip(&plain).map(|(p, u)| p / u.max(1e-12)).collect();
    let ratio_stats = TimingStats::from_samples(&ratios);
    let unprotected = TimingStats::from_samples(&plain);
    let protected = TimingStats::from_samples(&protected);
    Ok(BenchReport {
        dims: *dims,
        reps,
        seed,
        ratio: protected.median_s / unprotected.median_s.max(1e-12),
        unprotected,
        protected,
        ratio_mean: ratio_stats.mean_s,
        ratio_variance: ratio_stats.variance_s2,
        sections,
    })
}
