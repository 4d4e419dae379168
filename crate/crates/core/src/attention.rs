//! Multi-head attention forward pass, plain and checksum-protected.
//!
//! The protected pass splits the six GEMMs into three sections, each with
//! one delayed detection point:
//!
//! * `S_AS`: `X*W^Q`, `X*W^K`, `Q*K^T`. `X` carries column checksums into
//!   `Q` and `K`; `AS` gets column checksums from `Q^c*K^T` and row
//!   checksums from `Q*(K^c)^T`, and is corrected before scaling.
//! * `S_CL`: `X*W^V`, `AP*V`. `W^V` carries row checksums into `V`, `AP` is
//!   freshly column-encoded, and `CL` is corrected with both.
//! * `S_O`: `CL*W^O`. The concatenated column checksums of `CL` flow into
//!   `O`, which is corrected along columns.
//!
//! Checksums are kept per (batch, head) slice. Checksum bookkeeping always
//! runs; only detection and correction follow the per-section frequency.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checksum::{
    roundoff_threshold, update_checksums_through_gemm, Axis, ChecksumPair, EncodedMatrix, Propagate,
};
use crate::eec::{correct_matrix_deterministic, correct_matrix_nondeterministic, CorrectionLog, EecConfig, Outcome};
use crate::error::{shape_err, AbftError, Result};
use crate::flops;
use crate::numerics::{gemm, scale, softmax_rows, Batched, BatchedMatrix, Matrix};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub seq_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub batches: usize,
}

impl Dims {
    pub fn new(seq_len: usize, d_model: usize, heads: usize, batches: usize) -> Result<Self> {
        let dims = Self {
            seq_len,
            d_model,
            heads,
            batches,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.d_model == 0 || self.heads == 0 || self.batches == 0 {
            return Err(AbftError::InvalidConfig(format!(
                "all dimensions must be >= 1, got {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(AbftError::InvalidConfig(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// `(rows, cols)` of one slice at `site`.
    pub fn site_shape(&self, site: Site) -> (usize, usize) {
        match site {
            Site::Q | Site::K | Site::V | Site::CL => (self.seq_len, self.d_k()),
            Site::AS => (self.seq_len, self.seq_len),
            Site::O => (self.seq_len, self.d_model),
        }
    }

    /// Number of heads a site is split into (`O` is one slice per batch).
    pub fn site_heads(&self, site: Site) -> usize {
        if site == Site::O {
            1
        } else {
            self.heads
        }
    }

    pub fn site_len(&self, site: Site) -> usize {
        let (r, c) = self.site_shape(site);
        self.batches * self.site_heads(site) * r * c
    }
}

/// GEMM outputs where faults can be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    Q,
    K,
    V,
    AS,
    CL,
    O,
}

impl Site {
    pub const ALL: [Site; 6] = [Site::Q, Site::K, Site::V, Site::AS, Site::CL, Site::O];

    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "Q",
            Site::K => "K",
            Site::V => "V",
            Site::AS => "AS",
            Site::CL => "CL",
            Site::O => "O",
        }
    }

    pub fn section(self) -> SectionId {
        match self {
            Site::Q | Site::K | Site::AS => SectionId::SAs,
            Site::V | Site::CL => SectionId::SCl,
            Site::O => SectionId::SO,
        }
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Site {
    type Err = AbftError;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| AbftError::InvalidConfig(format!("unknown site {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SectionId {
    #[serde(rename = "S_AS")]
    SAs,
    #[serde(rename = "S_CL")]
    SCl,
    #[serde(rename = "S_O")]
    SO,
}

impl SectionId {
    pub const ALL: [SectionId; 3] = [SectionId::SAs, SectionId::SCl, SectionId::SO];

    pub fn name(self) -> &'static str {
        match self {
            SectionId::SAs => "S_AS",
            SectionId::SCl => "S_CL",
            SectionId::SO => "S_O",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for SectionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    heads: usize,
}

impl AttentionParams {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix, wo: Matrix, heads: usize) -> Result<Self> {
        let d = wq.rows();
        for (name, w) in [("W_Q", &wq), ("W_K", &wk), ("W_V", &wv), ("W_O", &wo)] {
            if w.shape() != (d, d) {
                return Err(shape_err(
                    "AttentionParams::new",
                    format!("{name} is {:?}, expected ({d}, {d})", w.shape()),
                ));
            }
            if !w.all_finite() {
                return Err(AbftError::InvalidConfig(format!("{name} has non-finite entries")));
            }
        }
        Dims::new(1, d, heads, 1)?;
        Ok(Self { wq, wk, wv, wo, heads })
    }

    /// Weights drawn from `N(0, 1/d_model)`.
    pub fn random<R: Rng + ?Sized>(d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let std = 1.0 / (d_model as f32).sqrt();
        let mut w = || Matrix::random_normal(d_model, d_model, std, rng);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        Self::new(wq, wk, wv, wo, heads)
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_k(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn wq(&self) -> &Matrix {
        &self.wq
    }

    pub fn wk(&self) -> &Matrix {
        &self.wk
    }

    pub fn wv(&self) -> &Matrix {
        &self.wv
    }

    pub fn wo(&self) -> &Matrix {
        &self.wo
    }

    fn head_weights(&self) -> HeadWeights {
        let dk = self.d_k();
        let split = |w: &Matrix| (0..self.heads).map(|h| w.col_block(h * dk, dk)).collect();
        HeadWeights {
            q: split(&self.wq),
            k: split(&self.wk),
            v: split(&self.wv),
        }
    }

    fn check_input(&self, x: &BatchedMatrix) -> Result<Dims> {
        let (s, d) = x.slice_shape();
        if x.heads() != 1 || d != self.d_model() {
            return Err(shape_err(
                "attention forward",
                format!(
                    "input is {}x{} slices of {:?}, expected batches x 1 of (seq, {})",
                    x.batches(),
                    x.heads(),
                    (s, d),
                    self.d_model()
                ),
            ));
        }
        Dims::new(s, d, self.heads, x.batches())
    }
}

struct HeadWeights {
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
}

/// Called on every GEMM output right after it is produced: `(site, batch,
/// head, matrix)`. `O` is reported with head 0.
pub type FaultHook<'a> = dyn FnMut(Site, usize, usize, &mut Matrix) + 'a;

/// Every intermediate of a plain forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Intermediates {
    pub q: BatchedMatrix,
    pub k: BatchedMatrix,
    pub v: BatchedMatrix,
    /// `Q*K^T` before scaling.
    pub scores: BatchedMatrix,
    pub probs: BatchedMatrix,
    pub context: BatchedMatrix,
    /// One slice per batch.
    pub output: BatchedMatrix,
}

impl Intermediates {
    pub fn site(&self, site: Site) -> &BatchedMatrix {
        match site {
            Site::Q => &self.q,
            Site::K => &self.k,
            Site::V => &self.v,
            Site::AS => &self.scores,
            Site::CL => &self.context,
            Site::O => &self.output,
        }
    }
}

pub fn forward_unprotected(x: &BatchedMatrix, params: &AttentionParams) -> Result<BatchedMatrix> {
    Ok(forward_traced(x, params, &mut |_, _, _, _| {})?.output)
}

/// Plain forward pass that keeps every intermediate and lets `hook` corrupt
/// GEMM outputs.
pub fn forward_traced(x: &BatchedMatrix, params: &AttentionParams, hook: &mut FaultHook) -> Result<Intermediates> {
    let dims = params.check_input(x)?;
    let w = params.head_weights();
    let inv_sqrt = 1.0 / (dims.d_k() as f32).sqrt();
    let n = dims.batches * dims.heads;
    let (mut qs, mut ks, mut vs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut ss, mut ps, mut cs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut os = Vec::with_capacity(dims.batches);
    for b in 0..dims.batches {
        let xb = x.get(b, 0);
        for h in 0..dims.heads {
            let mut q = gemm(xb, &w.q[h], false, false)?;
            hook(Site::Q, b, h, &mut q);
            let mut k = gemm(xb, &w.k[h], false, false)?;
            hook(Site::K, b, h, &mut k);
            let mut s = gemm(&q, &k, false, true)?;
            hook(Site::AS, b, h, &mut s);
            let p = softmax_rows(&scale(&s, inv_sqrt));
            let mut v = gemm(xb, &w.v[h], false, false)?;
            hook(Site::V, b, h, &mut v);
            let mut c = gemm(&p, &v, false, false)?;
            hook(Site::CL, b, h, &mut c);
            qs.push(q);
            ks.push(k);
            vs.push(v);
            ss.push(s);
            ps.push(p);
            cs.push(c);
        }
        let heads: Vec<&Matrix> = cs[b * dims.heads..].iter().collect();
        let mut o = gemm(&Matrix::hconcat(&heads)?, &params.wo, false, false)?;
        hook(Site::O, b, 0, &mut o);
        os.push(o);
    }
    let (bs, hs) = (dims.batches, dims.heads);
    Ok(Intermediates {
        q: BatchedMatrix::from_slices(bs, hs, qs)?,
        k: BatchedMatrix::from_slices(bs, hs, ks)?,
        v: BatchedMatrix::from_slices(bs, hs, vs)?,
        scores: BatchedMatrix::from_slices(bs, hs, ss)?,
        probs: BatchedMatrix::from_slices(bs, hs, ps)?,
        context: BatchedMatrix::from_slices(bs, hs, cs)?,
        output: BatchedMatrix::from_slices(bs, 1, os)?,
    })
}

/// Detection frequency of each section, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionFrequencies {
    #[serde(rename = "S_AS")]
    pub s_as: f64,
    #[serde(rename = "S_CL")]
    pub s_cl: f64,
    #[serde(rename = "S_O")]
    pub s_o: f64,
}

impl SectionFrequencies {
    pub const ALWAYS: Self = Self::uniform(1.0);
    pub const NEVER: Self = Self::uniform(0.0);

    pub const fn uniform(f: f64) -> Self {
        Self {
            s_as: f,
            s_cl: f,
            s_o: f,
        }
    }

    pub fn get(&self, section: SectionId) -> f64 {
        match section {
            SectionId::SAs => self.s_as,
            SectionId::SCl => self.s_cl,
            SectionId::SO => self.s_o,
        }
    }

    pub fn set(&mut self, section: SectionId, f: f64) {
        match section {
            SectionId::SAs => self.s_as = f,
            SectionId::SCl => self.s_cl = f,
            SectionId::SO => self.s_o = f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in SectionId::ALL {
            let f = self.get(s);
            if !(0.0..=1.0).contains(&f) {
                return Err(AbftError::InvalidConfig(format!(
                    "frequency of {s} must be in [0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for SectionFrequencies {
    fn default() -> Self {
        Self::ALWAYS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtectionConfig {
    pub frequencies: SectionFrequencies,
    pub near_inf: f32,
    pub correct: f32,
    /// Picks the phase of the detection schedule.
    pub seed: u64,
}

impl Default for ProtectionConfig {
    fn default() -> Self {
        Self {
            frequencies: SectionFrequencies::ALWAYS,
            near_inf: EecConfig::DEFAULT_NEAR_INF,
            correct: EecConfig::DEFAULT_CORRECT,
            seed: 0,
        }
    }
}

impl ProtectionConfig {
    pub fn with_frequencies(frequencies: SectionFrequencies) -> Self {
        Self {
            frequencies,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frequencies.validate()?;
        if !(0.0 < self.correct && self.correct < self.near_inf) {
            return Err(AbftError::InvalidConfig(format!(
                "need 0 < T_correct < T_nearINF, got {} and {}",
                self.correct, self.near_inf
            )));
        }
        Ok(())
    }

    fn eec(&self, roundoff: f32) -> EecConfig {
        EecConfig {
            roundoff,
            near_inf: self.near_inf,
            correct: self.correct,
        }
    }
}

/// Counter-based schedule: over any run of invocations a section with
/// frequency `f` is checked `floor` or `ceil` of `f` times the run length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionSchedule {
    frequencies: SectionFrequencies,
    phases: [f64; 3],
}

impl DetectionSchedule {
    pub fn new(frequencies: SectionFrequencies, seed: u64) -> Self {
        let phases = SectionId::ALL.map(|s| seed::unit_f64(seed::derive(seed, 0x5EC7, s as u64)));
        Self { frequencies, phases }
    }

    /// Whether `section` runs detection at invocation `n` (0-based).
    pub fn runs(&self, section: SectionId, n: u64) -> bool {
        let f = self.frequencies.get(section);
        if f >= 1.0 {
            return true;
        }
        if f <= 0.0 {
            return false;
        }
        let c = (n + 1) as f64 + self.phases[section.index()];
        (c * f).floor() > ((c - 1.0) * f).floor()
    }
}

/// What one section did during one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionReport {
    pub section: SectionId,
    /// Whether detection ran this invocation.
    pub ran: bool,
    /// Roundoff threshold per checked slice, in slice order.
    pub thresholds: Vec<f32>,
    pub logs: Vec<CorrectionLog>,
    /// Checksum flops spent, bookkeeping included.
    pub flops: u64,
}

impl SectionReport {
    fn new(section: SectionId, ran: bool) -> Self {
        Self {
            section,
            ran,
            thresholds: Vec::new(),
            logs: Vec::new(),
            flops: 0,
        }
    }

    pub fn all_clean(&self) -> bool {
        self.logs.iter().all(|l| l.outcome == Outcome::Clean)
    }

    pub fn failed(&self) -> bool {
        self.logs.iter().any(|l| l.outcome == Outcome::Uncorrectable)
    }

    /// Any log that saw a checksum mismatch.
    pub fn detected(&self) -> bool {
        self.logs.iter().any(|l| l.outcome != Outcome::Clean)
    }
}

/// Every intermediate of a protected pass with its checksums, after
/// correction, plus what each section did.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub invocation: u64,
    pub x: Batched<EncodedMatrix>,
    pub q: Batched<EncodedMatrix>,
    pub k: Batched<EncodedMatrix>,
    pub v: Batched<EncodedMatrix>,
    pub scores: Batched<EncodedMatrix>,
    pub probs: Batched<EncodedMatrix>,
    pub context: Batched<EncodedMatrix>,
    pub output: Batched<EncodedMatrix>,
    /// Indexed by [`SectionId::index`].
    pub sections: Vec<SectionReport>,
    /// Set when any section left an uncorrectable error behind.
    pub failed: bool,
}

impl AttentionTrace {
    pub fn section(&self, id: SectionId) -> &SectionReport {
        &self.sections[id.index()]
    }

    pub fn detected(&self) -> bool {
        self.sections.iter().any(SectionReport::detected)
    }

    pub fn intermediates(&self) -> Intermediates {
        let plain = |m: &Batched<EncodedMatrix>| m.map(|e| e.matrix.clone());
        Intermediates {
            q: plain(&self.q),
            k: plain(&self.k),
            v: plain(&self.v),
            scores: plain(&self.scores),
            probs: plain(&self.probs),
            context: plain(&self.context),
            output: plain(&self.output),
        }
    }

    pub fn output_matrix(&self) -> BatchedMatrix {
        self.output.map(|e| e.matrix.clone())
    }
}

/// A protected attention layer that keeps its invocation counter across
/// calls, so detection frequencies below 1 alternate between passes.
#[derive(Debug, Clone)]
pub struct ProtectedAttention {
    params: AttentionParams,
    config: ProtectionConfig,
    schedule: DetectionSchedule,
    invocations: u64,
}

impl ProtectedAttention {
    pub fn new(params: AttentionParams, config: ProtectionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            schedule: DetectionSchedule::new(config.frequencies, config.seed),
            params,
            config,
            invocations: 0,
        })
    }

    pub fn params(&self) -> &AttentionParams {
        &self.params
    }

    pub fn invocations(&self) -> u64 {
        self.invocations
    }

    pub fn forward(&mut self, x: &BatchedMatrix) -> Result<(BatchedMatrix, AttentionTrace)> {
        self.forward_with_hook(x, &mut |_, _, _, _| {})
    }

    pub fn forward_with_hook(
        &mut self,
        x: &BatchedMatrix,
        hook: &mut FaultHook,
    ) -> Result<(BatchedMatrix, AttentionTrace)> {
        let n = self.invocations;
        self.invocations += 1;
        let run = SectionId::ALL.map(|s| self.schedule.runs(s, n));
        let trace = protected_pass(x, &self.params, &self.config, run, n, hook)?;
        Ok((trace.output_matrix(), trace))
    }
}

/// One protected pass as the first invocation of a fresh layer.
pub fn forward_protected(
    x: &BatchedMatrix,
    params: &AttentionParams,
    config: &ProtectionConfig,
) -> Result<(BatchedMatrix, AttentionTrace)> {
    forward_protected_with_hook(x, params, config, &mut |_, _, _, _| {})
}

pub fn forward_protected_with_hook(
    x: &BatchedMatrix,
    params: &AttentionParams,
    config: &ProtectionConfig,
    hook: &mut FaultHook,
) -> Result<(BatchedMatrix, AttentionTrace)> {
    config.validate()?;
    let schedule = DetectionSchedule::new(config.frequencies, config.seed);
    let run = SectionId::ALL.map(|s| schedule.runs(s, 0));
    let trace = protected_pass(x, params, config, run, 0, hook)?;
    Ok((trace.output_matrix(), trace))
}

fn counted<T>(acc: &mut u64, f: impl FnOnce() -> T) -> T {
    let (out, n) = flops::measure(f);
    *acc += n;
    out
}

fn protected_pass(
    x: &BatchedMatrix,
    params: &AttentionParams,
    config: &ProtectionConfig,
    run: [bool; 3],
    invocation: u64,
    hook: &mut FaultHook,
) -> Result<AttentionTrace> {
    let dims = params.check_input(x)?;
    let w = params.head_weights();
    let (s, d, dk) = (dims.seq_len, dims.d_model, dims.d_k());
    let inv_sqrt = 1.0 / (dk as f32).sqrt();
    let near_inf = config.near_inf;
    let mut reports = SectionId::ALL.map(|id| SectionReport::new(id, run[id.index()]));
    let [rep_as, rep_cl, rep_o] = &mut reports;

    let wq: Vec<EncodedMatrix> = w.q.into_iter().map(EncodedMatrix::plain).collect();
    let wk: Vec<EncodedMatrix> = w.k.into_iter().map(EncodedMatrix::plain).collect();
    let wv: Vec<EncodedMatrix> = counted(&mut rep_cl.flops, || {
        w.v.into_iter().map(EncodedMatrix::with_rows).collect()
    });
    let wo = EncodedMatrix::plain(params.wo.clone());
    let wo_mag = params.wo.max_abs();

    let n = dims.batches * dims.heads;
    let mut xs = Vec::with_capacity(dims.batches);
    let (mut qs, mut ks, mut vs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut ss, mut ps, mut cs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut os = Vec::with_capacity(dims.batches);

    for b in 0..dims.batches {
        let x_enc = counted(&mut rep_as.flops, || EncodedMatrix::with_columns(x.get(b, 0).clone()));
        for h in 0..dims.heads {
            // S_AS
            let mut q = gemm(&x_enc.matrix, &wq[h].matrix, false, false)?;
            hook(Site::Q, b, h, &mut q);
            let q_enc = counted(&mut rep_as.flops, || {
                update_checksums_through_gemm(&x_enc, &wq[h], false, q, Propagate::COLUMNS)
            })?;
            let mut k = gemm(&x_enc.matrix, &wk[h].matrix, false, false)?;
            hook(Site::K, b, h, &mut k);
            let k_enc = counted(&mut rep_as.flops, || {
                update_checksums_through_gemm(&x_enc, &wk[h], false, k, Propagate::COLUMNS)
            })?;
            let mut scores = gemm(&q_enc.matrix, &k_enc.matrix, false, true)?;
            hook(Site::AS, b, h, &mut scores);
            let mut s_enc = counted(&mut rep_as.flops, || {
                update_checksums_through_gemm(&q_enc, &k_enc, true, scores, Propagate::BOTH)
            })?;
            let e = roundoff_threshold(
                dk,
                q_enc.matrix.finite_max_abs(near_inf),
                k_enc.matrix.finite_max_abs(near_inf),
            );
            rep_as.thresholds.push(e);
            if rep_as.ran {
                let log = counted(&mut rep_as.flops, || {
                    correct_matrix_nondeterministic(&mut s_enc, &config.eec(e), &format!("AS[{b},{h}]"))
                })?;
                rep_as.logs.push(log);
            }

            // S_CL
            let probs = softmax_rows(&scale(&s_enc.matrix, inv_sqrt));
            let mut v = gemm(&x_enc.matrix, &wv[h].matrix, false, false)?;
            hook(Site::V, b, h, &mut v);
            let v_enc = counted(&mut rep_cl.flops, || {
                update_checksums_through_gemm(&x_enc, &wv[h], false, v, Propagate::ROWS)
            })?;
            let p_enc = counted(&mut rep_cl.flops, || EncodedMatrix::with_columns(probs));
            let mut context = gemm(&p_enc.matrix, &v_enc.matrix, false, false)?;
            hook(Site::CL, b, h, &mut context);
            let mut c_enc = counted(&mut rep_cl.flops, || {
                update_checksums_through_gemm(&p_enc, &v_enc, false, context, Propagate::BOTH)
            })?;
            let e = roundoff_threshold(
                s,
                p_enc.matrix.finite_max_abs(near_inf),
                v_enc.matrix.finite_max_abs(near_inf),
            );
            rep_cl.thresholds.push(e);
            if rep_cl.ran {
                let log = counted(&mut rep_cl.flops, || {
                    correct_matrix_nondeterministic(&mut c_enc, &config.eec(e), &format!("CL[{b},{h}]"))
                })?;
                rep_cl.logs.push(log);
            }

            qs.push(q_enc);
            ks.push(k_enc);
            vs.push(v_enc);
            ss.push(s_enc);
            ps.push(p_enc);
            cs.push(c_enc);
        }

        // S_O
        let heads = &cs[b * dims.heads..];
        let blocks: Vec<&Matrix> = heads.iter().map(|c| &c.matrix).collect();
        let mut cat_sums = ChecksumPair {
            axis: Axis::Column,
            unweighted: Vec::with_capacity(d),
            weighted: Vec::with_capacity(d),
        };
        for c in heads {
            let pair = c.col_checksums.as_ref().expect("CL carries column checksums");
            cat_sums.unweighted.extend_from_slice(&pair.unweighted);
            cat_sums.weighted.extend_from_slice(&pair.weighted);
        }
        let cat = EncodedMatrix {
            matrix: Matrix::hconcat(&blocks)?,
            col_checksums: Some(cat_sums),
            row_checksums: None,
        };
        let mut out = gemm(&cat.matrix, &wo.matrix, false, false)?;
        hook(Site::O, b, 0, &mut out);
        let mut o_enc = counted(&mut rep_o.flops, || {
            update_checksums_through_gemm(&cat, &wo, false, out, Propagate::COLUMNS)
        })?;
        let e = roundoff_threshold(d, cat.matrix.finite_max_abs(near_inf), wo_mag);
        rep_o.thresholds.push(e);
        if rep_o.ran {
            let log = counted(&mut rep_o.flops, || {
                correct_matrix_deterministic(&mut o_enc, Axis::Column, &config.eec(e), &format!("O[{b}]"))
            })?;
            rep_o.logs.push(log);
        }
        os.push(o_enc);
        xs.push(x_enc);
    }

    let (bs, hs) = (dims.batches, dims.heads);
    let grid = |v: Vec<EncodedMatrix>, heads: usize| {
        let mut it = v.into_iter();
        Batched::from_fn(bs, heads, |_, _| it.next().expect("one slice per cell"))
    };
    let sections = Vec::from(reports);
    let failed = sections.iter().any(SectionReport::failed);
    Ok(AttentionTrace {
        invocation,
        x: grid(xs, 1),
        q: grid(qs, hs),
        k: grid(ks, hs),
        v: grid(vs, hs),
        scores: grid(ss, hs),
        probs: grid(ps, hs),
        context: grid(cs, hs),
        output: grid(os, 1),
        sections,
        failed,
    })
}

/// Analytic checksum flops of one section over a whole forward pass with
/// detection enabled and no faults: encoding, checksum updates through the
/// section's GEMMs, and one detection sweep.
pub fn section_cost(section: SectionId, dims: &Dims) -> u64 {
    let (s, d, h, dk, b) = (
        dims.seq_len as u64,
        dims.d_model as u64,
        dims.heads as u64,
        dims.d_k() as u64,
        dims.batches as u64,
    );
    match section {
        // encode X, Q^c and K^c, AS^c and AS^r, column pass plus row probe
        SectionId::SAs => b * (3 * s * d + 8 * d * d + 8 * s * d + h * (6 * s * s + 4 * s)),
        // encode W^V once, then per slice: V^r, AP^c, CL^c, CL^r, both sweeps
        SectionId::SCl => {
            3 * d * d + b * h * (4 * s * d + 3 * s * s + 4 * s * dk + 4 * s * s + 6 * s * dk + 2 * dk + 2 * s)
        }
        // O^c and one column pass
        SectionId::SO => b * (4 * d * d + 3 * s * d + 2 * d),
    }
}
