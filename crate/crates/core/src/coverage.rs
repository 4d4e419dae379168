//! Poisson fault-coverage model for the three protection sections and the
//! greedy choice of detection frequencies that meets a coverage target at
//! least checksum cost, with a Monte-Carlo cross-check.
//!
//! Errors of type `e` in an operation with `n` flops arrive as
//! `Poisson(lambda_e * n)`. A section survives an invocation when it sees no
//! error, or exactly one error that is either caught (detection ran, with
//! probability `f`) or harmless. Two or more errors in one section count as a
//! failure.
//!
//! Coverage values sit extremely close to 1, so everything is computed on
//! the failure side (`1 - FC`) and converted at the end.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Poisson;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{section_cost, Dims, SectionFrequencies, SectionId, Site};
use crate::error::{AbftError, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorType {
    Inf,
    NaN,
    NearInf,
}

impl ErrorType {
    pub const ALL: [ErrorType; 3] = [ErrorType::Inf, ErrorType::NaN, ErrorType::NearInf];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Errors per flop for each type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateProfile {
    pub lambda_inf: f64,
    pub lambda_nan: f64,
    pub lambda_ninf: f64,
}

impl ErrorRateProfile {
    /// Same rate for all three types, given as errors per 10^25 flops.
    pub fn per_1e25_flops(rate: f64) -> Self {
        let l = rate * 1e-25;
        Self {
            lambda_inf: l,
            lambda_nan: l,
            lambda_ninf: l,
        }
    }

    pub fn get(&self, e: ErrorType) -> f64 {
        match e {
            ErrorType::Inf => self.lambda_inf,
            ErrorType::NaN => self.lambda_nan,
            ErrorType::NearInf => self.lambda_ninf,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lambda_inf: self.lambda_inf * k,
            lambda_nan: self.lambda_nan * k,
            lambda_ninf: self.lambda_ninf * k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in ErrorType::ALL {
            let l = self.get(e);
            if !(l >= 0.0 && l.is_finite()) {
                return Err(AbftError::InvalidConfig(format!(
                    "error rate for {e:?} must be finite and >= 0, got {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Probability that an unhandled error of each type leads to a
/// non-trainable state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phi {
    pub inf: f64,
    pub nan: f64,
    pub ninf: f64,
}

impl Phi {
    pub fn get(&self, e: ErrorType) -> f64 {
        match e {
            ErrorType::Inf => self.inf,
            ErrorType::NaN => self.nan,
            ErrorType::NearInf => self.ninf,
        }
    }

    pub fn uniform(p: f64) -> Self {
        Self {
            inf: p,
            nan: p,
            ninf: p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpProfile {
    pub name: String,
    pub n_flops: f64,
    pub phi: Phi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionProfile {
    pub id: SectionId,
    pub ops: Vec<OpProfile>,
    /// Checksum cost of running the section's protection once.
    pub t_cost: f64,
}

impl SectionProfile {
    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(AbftError::InvalidConfig(format!(
                "section {} has no operations",
                self.id
            )));
        }
        if !(self.t_cost > 0.0 && self.t_cost.is_finite()) {
            return Err(AbftError::InvalidConfig(format!(
                "section {} needs t_cost > 0",
                self.id
            )));
        }
        for op in &self.ops {
            if !(op.n_flops >= 0.0 && op.n_flops.is_finite()) {
                return Err(AbftError::InvalidConfig(format!("{}: n_flops must be >= 0", op.name)));
            }
            for e in ErrorType::ALL {
                if !(0.0..=1.0).contains(&op.phi.get(e)) {
                    return Err(AbftError::InvalidConfig(format!("{}: phi must be in [0, 1]", op.name)));
                }
            }
        }
        Ok(())
    }

    fn mean(&self, j: usize, e: ErrorType, rates: &ErrorRateProfile) -> f64 {
        rates.get(e) * self.ops[j].n_flops
    }

    /// Expected number of errors in one invocation.
    pub fn total_mean(&self, rates: &ErrorRateProfile) -> f64 {
        (0..self.ops.len())
            .flat_map(|j| ErrorType::ALL.map(|e| self.mean(j, e, rates)))
            .sum()
    }
}

/// How the vulnerability `phi` enters `H = f + (1 - f) * s`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HConvention {
    /// `s = phi`, the formula as usually written.
    #[default]
    Printed,
    /// `s = 1 - phi`, reading `phi` as the probability of failure.
    Survival,
}

impl HConvention {
    /// Probability that an unchecked error of this kind is harmless.
    pub fn survival(self, phi: f64) -> f64 {
        match self {
            HConvention::Printed => phi,
            HConvention::Survival => 1.0 - phi,
        }
    }
}

fn ln_factorial(k: u64) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// Poisson pmf `P(k)` for mean `lambda * n`, evaluated in log space.
pub fn poisson_prob(lambda: f64, n: f64, k: u64) -> f64 {
    let mu = lambda * n;
    if mu == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (-mu + k as f64 * mu.ln() - ln_factorial(k)).exp()
}

/// `P(N >= 2)` for `N ~ Poisson(mu)` without cancellation at small `mu`.
pub fn poisson_at_least_two(mu: f64) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    if mu >= 1.0 {
        return (-mu).exp() * (mu.exp_m1() - mu);
    }
    // e^-mu * sum_{k>=2} mu^k / k!
    let mut term = mu * mu / 2.0;
    let mut sum = 0.0;
    let mut k = 2.0;
    while term > sum * 1e-18 {
        sum += term;
        k += 1.0;
        term *= mu / k;
    }
    (-mu).exp() * sum
}

/// `R_free`: no error of any type in any operation of the section.
pub fn section_free_prob(section: &SectionProfile, rates: &ErrorRateProfile) -> f64 {
    let mut p = 1.0;
    for j in 0..section.ops.len() {
        for e in ErrorType::ALL {
            p *= poisson_prob(rates.get(e), section.ops[j].n_flops, 0);
        }
    }
    p
}

/// `R_e(j)`: exactly one error, of type `e`, in operation `j`, and none
/// anywhere else in the section.
pub fn section_single_error_prob(
    section: &SectionProfile,
    rates: &ErrorRateProfile,
    j: usize,
    e: ErrorType,
) -> Result<f64> {
    let op = section
        .ops
        .get(j)
        .ok_or_else(|| AbftError::InvalidConfig(format!("operation index {j} out of range")))?;
    let mut p = 1.0;
    for t in ErrorType::ALL {
        p *= poisson_prob(rates.get(t), op.n_flops, (t == e) as u64);
    }
    let rest = SectionProfile {
        id: section.id,
        ops: section
            .ops
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != j)
            .map(|(_, o)| o.clone())
            .collect(),
        t_cost: section.t_cost,
    };
    Ok(p * section_free_prob(&rest, rates))
}

/// `sum_j sum_e R_e(j) * (1 - s_je)`: the failure probability that running
/// detection every time removes.
fn removable_failure(section: &SectionProfile, rates: &ErrorRateProfile, conv: HConvention) -> f64 {
    let free = (-section.total_mean(rates)).exp();
    let mut sum = 0.0;
    for (j, op) in section.ops.iter().enumerate() {
        for e in ErrorType::ALL {
            sum += section.mean(j, e, rates) * (1.0 - conv.survival(op.phi.get(e)));
        }
    }
    free * sum
}

/// `1 - FC_S` at frequency `f`.
pub fn section_failure_prob(section: &SectionProfile, rates: &ErrorRateProfile, f: f64, conv: HConvention) -> f64 {
    poisson_at_least_two(section.total_mean(rates)) + (1.0 - f) * removable_failure(section, rates, conv)
}

/// `FC_S = R_free + sum_j sum_e R_e(j) * H_e(j)` with
/// `H = f + (1 - f) * s`.
pub fn fault_coverage(section: &SectionProfile, rates: &ErrorRateProfile, f: f64, conv: HConvention) -> f64 {
    1.0 - section_failure_prob(section, rates, f, conv)
}

/// `1 - FC_att`, with `FC_att` the product of the section coverages.
pub fn attention_failure_prob(
    assignment: &SectionFrequencies,
    profiles: &[SectionProfile],
    rates: &ErrorRateProfile,
    conv: HConvention,
) -> f64 {
    let log_survive: f64 = profiles
        .iter()
        .map(|s| (-section_failure_prob(s, rates, assignment.get(s.id), conv)).ln_1p())
        .sum();
    -log_survive.exp_m1()
}

pub fn attention_fc(
    assignment: &SectionFrequencies,
    profiles: &[SectionProfile],
    rates: &ErrorRateProfile,
    conv: HConvention,
) -> f64 {
    1.0 - attention_failure_prob(assignment, profiles, rates, conv)
}

/// Fault coverage efficiency as usually written:
/// `(R_free + sum R_e(j) * (1 - s)) / T_S`.
pub fn fce(section: &SectionProfile, rates: &ErrorRateProfile, conv: HConvention) -> f64 {
    (section_free_prob(section, rates) + removable_failure(section, rates, conv)) / section.t_cost
}

/// Coverage gained per unit of checksum time, `dFC_S / d(f T_S)`. This is
/// `fce` without the `R_free / T_S` term.
pub fn fce_marginal(section: &SectionProfile, rates: &ErrorRateProfile, conv: HConvention) -> f64 {
    removable_failure(section, rates, conv) / section.t_cost
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionAllocation {
    pub section: SectionId,
    pub frequency: f64,
    pub fce: f64,
    pub fce_marginal: f64,
    /// Failure probability at frequency 0 and 1.
    pub failure_at_zero: f64,
    pub failure_at_one: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub frequencies: SectionFrequencies,
    /// Sections in the order the greedy pass filled them.
    pub order: Vec<SectionId>,
    pub sections: Vec<SectionAllocation>,
    /// `FC_att` of the returned frequencies (product form).
    pub analytic_fc: f64,
    pub analytic_failure: f64,
    /// Coverage under the additive form the greedy pass works with.
    pub approx_fc: f64,
    pub approx_failure: f64,
    pub target_failure: f64,
    /// `sum f_S T_S`.
    pub cost: f64,
    pub infeasible: bool,
    /// `FC_att` with every section at frequency 1.
    pub best_achievable_fc: f64,
}

pub fn optimize_frequencies(
    profiles: &[SectionProfile],
    rates: &ErrorRateProfile,
    fc_target: f64,
    conv: HConvention,
) -> Result<OptimizationResult> {
    if !(fc_target > 0.0 && fc_target <= 1.0) {
        return Err(AbftError::InvalidConfig(format!(
            "fc_target must be in (0, 1], got {fc_target}"
        )));
    }
    optimize_for_failure(profiles, rates, 1.0 - fc_target, conv)
}

/// Greedy allocation against a tolerated failure probability per
/// invocation, `1 - FC_target`, which keeps precision for targets like
/// `1e-11`.
///
/// `1 - FC_S` is linear in `f_S`, and the sum of the section failure
/// probabilities bounds the product form from above, so filling sections in
/// descending marginal efficiency until the summed failure meets the target
/// solves the additive problem exactly and satisfies the product form.
pub fn optimize_for_failure(
    profiles: &[SectionProfile],
    rates: &ErrorRateProfile,
    target_failure: f64,
    conv: HConvention,
) -> Result<OptimizationResult> {
    rates.validate()?;
    if !(0.0..1.0).contains(&target_failure) {
        return Err(AbftError::InvalidConfig(format!(
            "target failure must be in [0, 1), got {target_failure}"
        )));
    }
    for p in profiles {
        p.validate()?;
    }

    let mut sections: Vec<SectionAllocation> = profiles
        .iter()
        .map(|s| SectionAllocation {
            section: s.id,
            frequency: 0.0,
            fce: fce(s, rates, conv),
            fce_marginal: fce_marginal(s, rates, conv),
            failure_at_zero: section_failure_prob(s, rates, 0.0, conv),
            failure_at_one: section_failure_prob(s, rates, 1.0, conv),
        })
        .collect();
    let mut order: Vec<usize> = (0..profiles.len()).collect();
    order.sort_by(|&a, &b| {
        sections[b]
            .fce_marginal
            .partial_cmp(&sections[a].fce_marginal)
            .expect("finite efficiencies")
            .then(a.cmp(&b))
    });

    let mut gap: f64 = sections.iter().map(|s| s.failure_at_zero).sum::<f64>() - target_failure;
    for &i in &order {
        if gap <= 0.0 {
            break;
        }
        let gain = sections[i].failure_at_zero - sections[i].failure_at_one;
        if gain <= 0.0 {
            continue;
        }
        if gain <= gap {
            sections[i].frequency = 1.0;
            gap -= gain;
        } else {
            sections[i].frequency = gap / gain;
            gap = 0.0;
        }
    }

    let mut frequencies = SectionFrequencies::NEVER;
    for s in &sections {
        frequencies.set(s.section, s.frequency);
    }
    let all_on = {
        let mut f = SectionFrequencies::NEVER;
        for p in profiles {
            f.set(p.id, 1.0);
        }
        f
    };
    let best_failure = attention_failure_prob(&all_on, profiles, rates, conv);
    let infeasible = best_failure > target_failure;
    if infeasible {
        frequencies = all_on;
        for s in &mut sections {
            s.frequency = 1.0;
        }
    } else {
        // the partial section may land a rounding error short of the target
        for _ in 0..64 {
            if attention_failure_prob(&frequencies, profiles, rates, conv) <= target_failure {
                break;
            }
            if let Some(s) = sections.iter_mut().find(|s| s.frequency > 0.0 && s.frequency < 1.0) {
                s.frequency = (s.frequency * (1.0 + 1e-12) + 1e-15).min(1.0);
                frequencies.set(s.section, s.frequency);
            } else {
                break;
            }
        }
    }

    let approx_failure: f64 = profiles
        .iter()
        .map(|s| section_failure_prob(s, rates, frequencies.get(s.id), conv))
        .sum();
    let analytic_failure = attention_failure_prob(&frequencies, profiles, rates, conv);
    let cost = profiles.iter().map(|s| frequencies.get(s.id) * s.t_cost).sum();
    Ok(OptimizationResult {
        frequencies,
        order: order.iter().map(|&i| profiles[i].id).collect(),
        sections,
        analytic_fc: 1.0 - analytic_failure,
        analytic_failure,
        approx_fc: 1.0 - approx_failure,
        approx_failure,
        target_failure,
        cost,
        infeasible,
        best_achievable_fc: 1.0 - best_failure,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub trials: u64,
    pub failures: u64,
    pub fc: f64,
    pub std_error: f64,
    /// Wilson 95% interval for the coverage.
    pub ci95: (f64, f64),
    pub analytic_fc: f64,
    /// Per section: invocations with no error.
    pub free_counts: Vec<u64>,
    /// Per section, per operation, per error type: invocations with exactly
    /// that single error.
    pub single_counts: Vec<Vec<[u64; 3]>>,
}

struct SectionSampler {
    total: Option<Poisson<f64>>,
    pick: Option<WeightedIndex<f64>>,
    survival: Vec<f64>,
    ops: usize,
    f: f64,
}

const MC_CHUNK: u64 = 1 << 14;

/// Simulates invocations: per section a Poisson error count, each error
/// assigned to an (operation, type) in proportion to its rate; detection
/// runs with probability `f`. A section with two or more errors fails when
/// checked; unchecked, it survives only if every error is harmless.
pub fn monte_carlo_validate(
    assignment: &SectionFrequencies,
    profiles: &[SectionProfile],
    rates: &ErrorRateProfile,
    conv: HConvention,
    trials: u64,
    seed: u64,
) -> Result<MonteCarloReport> {
    if trials == 0 {
        return Err(AbftError::InvalidConfig("monte carlo needs at least one trial".into()));
    }
    rates.validate()?;
    assignment.validate()?;
    let samplers: Vec<SectionSampler> = profiles
        .iter()
        .map(|s| {
            s.validate()?;
            let mut weights = Vec::new();
            let mut survival = Vec::new();
            for (j, op) in s.ops.iter().enumerate() {
                for e in ErrorType::ALL {
                    weights.push(s.mean(j, e, rates));
                    survival.push(conv.survival(op.phi.get(e)));
                }
            }
            let mu = s.total_mean(rates);
            let (total, pick) = if mu > 0.0 {
                let total =
                    Poisson::new(mu).map_err(|e| AbftError::InvalidConfig(format!("poisson mean {mu}: {e}")))?;
                let pick = WeightedIndex::new(&weights).map_err(|e| AbftError::InvalidConfig(e.to_string()))?;
                (Some(total), Some(pick))
            } else {
                (None, None)
            };
            Ok(SectionSampler {
                total,
                pick,
                survival,
                ops: s.ops.len(),
                f: assignment.get(s.id),
            })
        })
        .collect::<Result<_>>()?;

    struct Acc {
        failures: u64,
        free: Vec<u64>,
        single: Vec<Vec<[u64; 3]>>,
    }
    let empty = || Acc {
        failures: 0,
        free: vec![0; samplers.len()],
        single: samplers.iter().map(|s| vec![[0; 3]; s.ops]).collect(),
    };
    let chunks = trials.div_ceil(MC_CHUNK);
    let acc = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::rng(seed, 0xC0FE, c);
            let n = MC_CHUNK.min(trials - c * MC_CHUNK);
            let mut acc = empty();
            for _ in 0..n {
                let mut ok = true;
                for (si, s) in samplers.iter().enumerate() {
                    let count = s.total.as_ref().map_or(0, |p| p.sample(&mut rng) as u64);
                    if count == 0 {
                        acc.free[si] += 1;
                        continue;
                    }
                    let pick = s.pick.as_ref().expect("errors imply a positive rate");
                    let checked = rng.random_bool(s.f);
                    if count == 1 {
                        let k = pick.sample(&mut rng);
                        acc.single[si][k / 3][k % 3] += 1;
                        ok &= checked || rng.random_bool(s.survival[k]);
                    } else if checked {
                        ok = false;
                    } else {
                        for _ in 0..count {
                            let k = pick.sample(&mut rng);
                            ok &= rng.random_bool(s.survival[k]);
                        }
                    }
                }
                acc.failures += (!ok) as u64;
            }
            acc
        })
        .reduce(empty, |mut a, b| {
            a.failures += b.failures;
            for (x, y) in a.free.iter_mut().zip(&b.free) {
                *x += y;
            }
            for (xs, ys) in a.single.iter_mut().zip(&b.single) {
                for (x, y) in xs.iter_mut().zip(ys) {
                    for t in 0..3 {
                        x[t] += y[t];
                    }
                }
            }
            a
        });

    let n = trials as f64;
    let p = (trials - acc.failures) as f64 / n;
    Ok(MonteCarloReport {
        trials,
        failures: acc.failures,
        fc: p,
        std_error: (p * (1.0 - p) / n).sqrt(),
        ci95: wilson(p, n, 1.96),
        analytic_fc: attention_fc(assignment, profiles, rates, conv),
        free_counts: acc.free,
        single_counts: acc.single,
    })
}

fn wilson(p: f64, n: f64, z: f64) -> (f64, f64) {
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Model families with published vulnerability measurements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    #[default]
    Bert,
    Gpt2,
    Neo,
    Roberta,
}

/// Measured probability (fraction) that an unhandled error injected at
/// `site` drives training into a non-trainable state. `O` was not
/// measured and returns `None`.
pub fn vulnerability(model: Model, e: ErrorType, site: Site) -> Option<f64> {
    // columns: Q, K, V, AS, CL (percent)
    let row: [f64; 5] = match (e, model) {
        (ErrorType::Inf, Model::Bert) => [100.0, 100.0, 100.0, 100.0, 100.0],
        (ErrorType::Inf, Model::Gpt2) => [91.8, 86.8, 100.0, 56.9, 100.0],
        (ErrorType::Inf, Model::Neo) => [100.0, 85.6, 100.0, 54.7, 100.0],
        (ErrorType::Inf, Model::Roberta) => [100.0, 99.9, 100.0, 100.0, 100.0],
        (ErrorType::NaN, Model::Bert) => [100.0, 100.0, 100.0, 100.0, 100.0],
        (ErrorType::NaN, Model::Gpt2) => [100.0, 100.0, 100.0, 54.7, 100.0],
        (ErrorType::NaN, Model::Neo) => [100.0, 100.0, 100.0, 54.7, 100.0],
        (ErrorType::NaN, Model::Roberta) => [100.0, 100.0, 100.0, 100.0, 100.0],
        (ErrorType::NearInf, Model::Bert) => [45.9, 43.4, 6.3, 0.2, 0.6],
        (ErrorType::NearInf, Model::Gpt2) => [38.4, 37.2, 1.0, 0.5, 0.7],
        (ErrorType::NearInf, Model::Neo) => [10.3, 14.4, 5.8, 11.2, 9.6],
        (ErrorType::NearInf, Model::Roberta) => [54.0, 49.9, 3.6, 5.5, 0.4],
    };
    let col = match site {
        Site::Q => 0,
        Site::K => 1,
        Site::V => 2,
        Site::AS => 3,
        Site::CL => 4,
        Site::O => return None,
    };
    Some(row[col] / 100.0)
}

fn phi_for(model: Model, site: Site) -> Phi {
    // CL x W^O was not measured; it consumes CL, so it inherits CL's values
    let site = if site == Site::O { Site::CL } else { site };
    let get = |e| vulnerability(model, e, site).expect("measured site");
    Phi {
        inf: get(ErrorType::Inf),
        nan: get(ErrorType::NaN),
        ninf: get(ErrorType::NearInf),
    }
}

/// Section profiles for one forward pass at `dims`: GEMM flop counts
/// (multiplied by `flop_scale`), measured vulnerabilities of `model`, and
/// the analytic checksum cost of each section.
pub fn attention_profiles(dims: &Dims, model: Model, flop_scale: f64) -> Result<Vec<SectionProfile>> {
    dims.validate()?;
    if !(flop_scale > 0.0 && flop_scale.is_finite()) {
        return Err(AbftError::InvalidConfig(format!(
            "flop_scale must be > 0, got {flop_scale}"
        )));
    }
    let (s, d, b) = (dims.seq_len as f64, dims.d_model as f64, dims.batches as f64);
    let proj = 2.0 * b * s * d * d * flop_scale;
    let square = 2.0 * b * s * s * d * flop_scale;
    let op = |name: &str, n_flops: f64, site: Site| OpProfile {
        name: name.to_string(),
        n_flops,
        phi: phi_for(model, site),
    };
    Ok(vec![
        SectionProfile {
            id: SectionId::SAs,
            ops: vec![
                op("X*W^Q", proj, Site::Q),
                op("X*W^K", proj, Site::K),
                op("Q*K^T", square, Site::AS),
            ],
            t_cost: section_cost(SectionId::SAs, dims) as f64,
        },
        SectionProfile {
            id: SectionId::SCl,
            ops: vec![op("X*W^V", proj, Site::V), op("AP*V", square, Site::CL)],
            t_cost: section_cost(SectionId::SCl, dims) as f64,
        },
        SectionProfile {
            id: SectionId::SO,
            ops: vec![op("CL*W^O", proj, Site::O)],
            t_cost: section_cost(SectionId::SO, dims) as f64,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_op(mu: f64, phi: f64, t: f64) -> SectionProfile {
        SectionProfile {
            id: SectionId::SAs,
            ops: vec![OpProfile {
                name: "op".into(),
                n_flops: mu,
                phi: Phi::uniform(phi),
            }],
            t_cost: t,
        }
    }

    fn rates(l: f64) -> ErrorRateProfile {
        ErrorRateProfile {
            lambda_inf: l,
            lambda_nan: l,
            lambda_ninf: l,
        }
    }

    #[test]
    fn poisson_examples() {
        assert_eq!(poisson_prob(0.0, 10.0, 0), 1.0);
        assert_eq!(poisson_prob(0.0, 10.0, 3), 0.0);
        assert!((poisson_prob(1.0, 1.0, 0) - (-1.0f64).exp()).abs() < 1e-15);
        for mu in [0.01, 0.5, 1.0, 2.5, 5.0] {
            let total: f64 = (0..=50).map(|k| poisson_prob(mu, 1.0, k)).sum();
            assert!((total - 1.0).abs() < 1e-12, "{mu}: {total}");
        }
    }

    #[test]
    fn at_least_two_matches_direct_sum() {
        for mu in [1e-9, 1e-4, 0.3, 0.99, 1.0, 4.0] {
            let direct: f64 = (2..=80).map(|k| poisson_prob(mu, 1.0, k)).sum();
            let got = poisson_at_least_two(mu);
            assert!(
                (got - direct).abs() <= 1e-14 * direct.max(1e-300) + 1e-300,
                "{mu}: {got} vs {direct}"
            );
        }
        // no cancellation at tiny means
        assert!((poisson_at_least_two(1e-12) / 5e-25 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn free_and_single_examples() {
        let s = one_op(1.0, 0.5, 1.0);
        assert_eq!(section_free_prob(&s, &rates(0.0)), 1.0);
        let only_inf = ErrorRateProfile {
            lambda_inf: 1.0,
            lambda_nan: 0.0,
            lambda_ninf: 0.0,
        };
        assert!((section_free_prob(&s, &only_inf) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(
            section_single_error_prob(&s, &rates(0.0), 0, ErrorType::NaN).unwrap(),
            0.0
        );
        assert!(section_single_error_prob(&s, &rates(0.0), 1, ErrorType::NaN).is_err());
        let mut two = s.clone();
        two.ops.push(two.ops[0].clone());
        let r = rates(0.1);
        let a = section_single_error_prob(&two, &r, 0, ErrorType::Inf).unwrap();
        let b = section_single_error_prob(&two, &r, 1, ErrorType::Inf).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coverage_examples() {
        let s = one_op(1.0, 0.3, 1.0);
        let r = rates(0.01);
        let free = section_free_prob(&s, &r);
        let singles: f64 = ErrorType::ALL
            .iter()
            .map(|&e| section_single_error_prob(&s, &r, 0, e).unwrap())
            .sum();
        assert!((fault_coverage(&s, &r, 1.0, HConvention::Printed) - (free + singles)).abs() < 1e-15);
        assert_eq!(fault_coverage(&s, &rates(0.0), 0.3, HConvention::Printed), 1.0);
        let unprotected = one_op(1.0, 0.0, 1.0);
        assert!((fault_coverage(&unprotected, &r, 0.0, HConvention::Printed) - free).abs() < 1e-15);
    }

    #[test]
    fn coverage_matches_direct_formula() {
        // H = f + (1 - f) * phi, straight from the definition
        let s = SectionProfile {
            id: SectionId::SCl,
            ops: vec![
                OpProfile {
                    name: "a".into(),
                    n_flops: 3.0,
                    phi: Phi {
                        inf: 0.2,
                        nan: 0.9,
                        ninf: 0.5,
                    },
                },
                OpProfile {
                    name: "b".into(),
                    n_flops: 7.0,
                    phi: Phi {
                        inf: 1.0,
                        nan: 0.1,
                        ninf: 0.0,
                    },
                },
            ],
            t_cost: 10.0,
        };
        let r = ErrorRateProfile {
            lambda_inf: 0.01,
            lambda_nan: 0.02,
            lambda_ninf: 0.005,
        };
        for f in [0.0, 0.25, 1.0] {
            let mut fc = section_free_prob(&s, &r);
            for (j, op) in s.ops.iter().enumerate() {
                for e in ErrorType::ALL {
                    let h = f + (1.0 - f) * op.phi.get(e);
                    fc += section_single_error_prob(&s, &r, j, e).unwrap() * h;
                }
            }
            assert!((fault_coverage(&s, &r, f, HConvention::Printed) - fc).abs() < 1e-14);
        }
    }

    #[test]
    fn fce_examples() {
        let s = one_op(1.0, 0.4, 2.0);
        let r = rates(0.05);
        let half = SectionProfile {
            t_cost: 1.0,
            ..s.clone()
        };
        assert!((fce(&half, &r, HConvention::Printed) - 2.0 * fce(&s, &r, HConvention::Printed)).abs() < 1e-15);
        let immune = one_op(1.0, 1.0, 2.0);
        assert!((fce(&immune, &r, HConvention::Printed) - section_free_prob(&immune, &r) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn marginal_fce_is_the_derivative() {
        let s = one_op(1.0, 0.4, 5.0);
        let r = rates(0.02);
        for conv in [HConvention::Printed, HConvention::Survival] {
            let h = 1e-4;
            let fd = (fault_coverage(&s, &r, h, conv) - fault_coverage(&s, &r, 0.0, conv)) / (h * s.t_cost);
            let m = fce_marginal(&s, &r, conv);
            assert!((fd - m).abs() <= 1e-6 * m.abs().max(1e-12), "{fd} vs {m}");
            let gap = fce(&s, &r, conv) - m;
            assert!((gap - section_free_prob(&s, &r) / s.t_cost).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_of_h() {
        let s = one_op(2.0, 0.35, 1.0);
        let r = rates(0.03);
        let conv = HConvention::Printed;
        let lhs = fault_coverage(&s, &r, 1.0, conv) - fault_coverage(&s, &r, 0.0, conv);
        let rhs: f64 = ErrorType::ALL
            .iter()
            .map(|&e| section_single_error_prob(&s, &r, 0, e).unwrap() * (1.0 - 0.35))
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn toy() -> Vec<SectionProfile> {
        vec![
            SectionProfile {
                id: SectionId::SAs,
                ..one_op(3.0, 0.2, 10.0)
            },
            SectionProfile {
                id: SectionId::SCl,
                ..one_op(2.0, 0.5, 4.0)
            },
            SectionProfile {
                id: SectionId::SO,
                ..one_op(1.0, 0.1, 1.0)
            },
        ]
    }

    #[test]
    fn optimizer_edge_targets() {
        let p = toy();
        let r = rates(0.001);
        let conv = HConvention::Printed;
        let zero = optimize_frequencies(&p, &r, 0.5, conv).unwrap();
        assert_eq!(zero.frequencies, SectionFrequencies::NEVER);
        assert!(!zero.infeasible);
        let best = attention_failure_prob(&SectionFrequencies::ALWAYS, &p, &r, conv);
        let full = optimize_for_failure(&p, &r, best * (1.0 + 1e-9), conv).unwrap();
        assert!(!full.infeasible);
        assert!(full.frequencies.s_as > 0.999 && full.frequencies.s_cl > 0.999 && full.frequencies.s_o > 0.999);
        let impossible = optimize_frequencies(&p, &r, 1.0, conv).unwrap();
        assert!(impossible.infeasible);
        assert_eq!(impossible.frequencies, SectionFrequencies::ALWAYS);
        let free = optimize_frequencies(&p, &rates(0.0), 1.0, conv).unwrap();
        assert!(!free.infeasible);
        assert_eq!(free.frequencies, SectionFrequencies::NEVER);
        assert!(optimize_frequencies(&p, &r, 0.0, conv).is_err());
    }

    #[test]
    fn one_section_suffices_picks_most_efficient() {
        let p = toy();
        let r = rates(0.001);
        let conv = HConvention::Printed;
        let base = attention_failure_prob(&SectionFrequencies::NEVER, &p, &r, conv);
        for scale in [1.0, 7.5] {
            let scaled: Vec<SectionProfile> = p
                .iter()
                .map(|s| SectionProfile {
                    t_cost: s.t_cost * scale,
                    ..s.clone()
                })
                .collect();
            let res = optimize_for_failure(&scaled, &r, base * 0.999, conv).unwrap();
            let best = scaled
                .iter()
                .max_by(|a, b| {
                    fce_marginal(a, &r, conv)
                        .partial_cmp(&fce_marginal(b, &r, conv))
                        .unwrap()
                })
                .unwrap()
                .id;
            assert_eq!(res.order[0], best);
            for s in SectionId::ALL {
                assert_eq!(res.frequencies.get(s) > 0.0, s == best, "{s}");
            }
        }
    }

    #[test]
    fn monte_carlo_zero_rate_is_exact() {
        let mc = monte_carlo_validate(
            &SectionFrequencies::uniform(0.3),
            &toy(),
            &rates(0.0),
            HConvention::Printed,
            1000,
            1,
        )
        .unwrap();
        assert_eq!((mc.failures, mc.fc), (0, 1.0));
        assert!(monte_carlo_validate(
            &SectionFrequencies::ALWAYS,
            &toy(),
            &rates(0.0),
            HConvention::Printed,
            0,
            1
        )
        .is_err());
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let run = || {
            monte_carlo_validate(
                &SectionFrequencies::uniform(0.5),
                &toy(),
                &rates(0.01),
                HConvention::Printed,
                50_000,
                9,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn table_lookup() {
        let close = |got: Option<f64>, want: f64| (got.unwrap() - want).abs() < 1e-12;
        assert!(close(vulnerability(Model::Gpt2, ErrorType::Inf, Site::AS), 0.569));
        assert!(close(vulnerability(Model::Bert, ErrorType::NearInf, Site::Q), 0.459));
        assert_eq!(vulnerability(Model::Neo, ErrorType::NaN, Site::O), None);
        let p = attention_profiles(&Dims::new(32, 64, 4, 2).unwrap(), Model::Bert, 1.0).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[2].ops[0].phi, phi_for(Model::Bert, Site::CL));
        assert_eq!(p[0].ops[0].n_flops, 2.0 * 2.0 * 32.0 * 64.0 * 64.0);
    }

    proptest! {
        #[test]
        fn coverage_monotone_in_frequency(
            mus in proptest::collection::vec(0.0f64..0.05, 3),
            phis in proptest::collection::vec(0.0f64..=1.0, 3),
            f in proptest::collection::vec(0.0f64..=1.0, 3),
            bump in 1e-6f64..0.5,
            axis in 0usize..3,
            survival in any::<bool>(),
        ) {
            let conv = if survival { HConvention::Survival } else { HConvention::Printed };
            let p: Vec<SectionProfile> = (0..3)
                .map(|i| SectionProfile { id: SectionId::ALL[i], ..one_op(mus[i], phis[i], 1.0 + i as f64) })
                .collect();
            let mut a = SectionFrequencies::NEVER;
            for (i, s) in SectionId::ALL.iter().enumerate() {
                a.set(*s, f[i]);
            }
            let mut b = a;
            let id = SectionId::ALL[axis];
            b.set(id, (a.get(id) + bump).min(1.0));
            let r = rates(1.0);
            prop_assert!(attention_fc(&b, &p, &r, conv) >= attention_fc(&a, &p, &r, conv));
            prop_assert!(fault_coverage(&p[axis], &r, b.get(id), conv) >= fault_coverage(&p[axis], &r, a.get(id), conv));
        }
    }
}
