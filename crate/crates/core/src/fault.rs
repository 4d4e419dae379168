//! Fault injection into GEMM outputs, propagation-pattern classification,
//! and the two experiment drivers built on them: the propagation study
//! (plain forward, where does one fault spread) and the detection campaign
//! (protected forward, is every fault caught and repaired).

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    forward_protected, forward_protected_with_hook, forward_traced, AttentionParams, Dims, Intermediates,
    ProtectionConfig, SectionId, Site,
};
use crate::eec::EecConfig;
use crate::error::{AbftError, Result};
use crate::numerics::{classify_value, flip_bit, BatchedMatrix, FloatClass, Matrix};
use crate::seed;
use crate::serde_float::f32_lossless;

/// Exponent MSB of an fp32.
pub const NEAR_INF_BIT: u32 = 30;

/// Extra elements tried when a bit flip does not land above the near-INF
/// threshold, before falling back to a linear scan.
pub const NEAR_INF_RESAMPLES: u32 = 8;

const STREAM_MODEL: u64 = 1;
const STREAM_STUDY: u64 = 2;
const STREAM_CAMPAIGN: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultKind {
    PlusInf,
    MinusInf,
    NaN,
    NearInfBitFlip,
}

impl FaultKind {
    pub const ALL: [FaultKind; 4] = [
        FaultKind::PlusInf,
        FaultKind::MinusInf,
        FaultKind::NaN,
        FaultKind::NearInfBitFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::PlusInf => "+INF",
            FaultKind::MinusInf => "-INF",
            FaultKind::NaN => "NaN",
            FaultKind::NearInfBitFlip => "nINF",
        }
    }

    /// The corrupted value that replaces `x`.
    pub fn apply(self, x: f32) -> f32 {
        match self {
            FaultKind::PlusInf => f32::INFINITY,
            FaultKind::MinusInf => f32::NEG_INFINITY,
            FaultKind::NaN => f32::NAN,
            FaultKind::NearInfBitFlip => flip_bit(x, NEAR_INF_BIT),
        }
    }
}

impl std::fmt::Display for FaultKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FaultKind {
    type Err = AbftError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "+inf" | "inf" | "plusinf" => Ok(FaultKind::PlusInf),
            "-inf" | "minusinf" => Ok(FaultKind::MinusInf),
            "nan" => Ok(FaultKind::NaN),
            "ninf" | "nearinf" | "nearinfbitflip" => Ok(FaultKind::NearInfBitFlip),
            _ => Err(AbftError::InvalidConfig(format!("unknown fault kind {s:?}"))),
        }
    }
}

/// When the fault strikes. Only output corruption right after the GEMM is
/// modelled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[default]
    AfterGemm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Element {
    pub batch: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
}

impl Element {
    /// Inverse of the flat index used for sampling: batch-major, then head,
    /// then row-major within the slice.
    pub fn from_flat(dims: &Dims, site: Site, flat: usize) -> Element {
        let (rows, cols) = dims.site_shape(site);
        let heads = dims.site_heads(site);
        let per_slice = rows * cols;
        let slice = flat / per_slice;
        let within = flat % per_slice;
        Element {
            batch: slice / heads,
            head: slice % heads,
            row: within / cols,
            col: within % cols,
        }
    }

    pub fn to_flat(&self, dims: &Dims, site: Site) -> usize {
        let (rows, cols) = dims.site_shape(site);
        let slice = self.batch * dims.site_heads(site) + self.head;
        slice * rows * cols + self.row * cols + self.col
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultSpec {
    pub site: Site,
    pub element: Element,
    pub kind: FaultKind,
    #[serde(default)]
    pub when: Stage,
}

impl FaultSpec {
    pub fn new(site: Site, element: Element, kind: FaultKind) -> Self {
        Self {
            site,
            element,
            kind,
            when: Stage::AfterGemm,
        }
    }

    fn out_of_range(&self, shape: String) -> AbftError {
        let e = self.element;
        AbftError::OutOfRange {
            site: self.site.name().to_string(),
            batch: e.batch,
            head: e.head,
            row: e.row,
            col: e.col,
            shape,
        }
    }

    /// Checks the element against the site shape for `dims`.
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let (rows, cols) = dims.site_shape(self.site);
        let heads = dims.site_heads(self.site);
        let e = self.element;
        if e.batch >= dims.batches || e.head >= heads || e.row >= rows || e.col >= cols {
            return Err(self.out_of_range(format!("{}x{}x{rows}x{cols}", dims.batches, heads)));
        }
        Ok(())
    }

    /// Applies the fault when `(site, batch, head)` matches; for use as a
    /// forward-pass hook.
    pub fn apply_if_matching(&self, site: Site, batch: usize, head: usize, m: &mut Matrix) {
        let e = self.element;
        if site == self.site && batch == e.batch && head == e.head {
            let x = m.get(e.row, e.col);
            m.set(e.row, e.col, self.kind.apply(x));
        }
    }
}

/// Copy of one slice with the fault applied at `(row, col)`; the batch and
/// head of the spec are the caller's business.
pub fn inject(m: &Matrix, spec: &FaultSpec) -> Result<Matrix> {
    let e = spec.element;
    if e.row >= m.rows() || e.col >= m.cols() {
        return Err(spec.out_of_range(format!("{}x{}", m.rows(), m.cols())));
    }
    let mut out = m.clone();
    out.set(e.row, e.col, spec.kind.apply(m.get(e.row, e.col)));
    Ok(out)
}

pub fn inject_batched(m: &BatchedMatrix, spec: &FaultSpec) -> Result<BatchedMatrix> {
    let e = spec.element;
    if e.batch >= m.batches() || e.head >= m.heads() {
        let (r, c) = m.slice_shape();
        return Err(spec.out_of_range(format!("{}x{}x{r}x{c}", m.batches(), m.heads())));
    }
    let mut out = m.clone();
    *out.get_mut(e.batch, e.head) = inject(m.get(e.batch, e.head), spec)?;
    Ok(out)
}

fn lands_near_inf(x: f32, near_inf: f32) -> bool {
    classify_value(flip_bit(x, NEAR_INF_BIT), near_inf) == FloatClass::NearInf
}

/// Replaces `flat` by an element whose exponent-MSB flip is near-INF:
/// up to [`NEAR_INF_RESAMPLES`] random draws, then the first suitable
/// element at or after `flat`. Returns the element and the number of
/// replacements made, or `None` when no element of the site qualifies.
pub fn resample_near_inf<R: Rng + ?Sized>(
    values: &BatchedMatrix,
    dims: &Dims,
    site: Site,
    flat: usize,
    near_inf: f32,
    rng: &mut R,
) -> Option<(Element, u32)> {
    let value = |i: usize| {
        let e = Element::from_flat(dims, site, i);
        values.get(e.batch, e.head).get(e.row, e.col)
    };
    if lands_near_inf(value(flat), near_inf) {
        return Some((Element::from_flat(dims, site, flat), 0));
    }
    let n = dims.site_len(site);
    for attempt in 1..=NEAR_INF_RESAMPLES {
        let i = rng.random_range(0..n);
        if lands_near_inf(value(i), near_inf) {
            return Some((Element::from_flat(dims, site, i), attempt));
        }
    }
    (0..n)
        .map(|k| (flat + k) % n)
        .find(|&i| lands_near_inf(value(i), near_inf))
        .map(|i| (Element::from_flat(dims, site, i), NEAR_INF_RESAMPLES + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    None,
    #[serde(rename = "0D")]
    D0,
    #[serde(rename = "1R")]
    R1,
    #[serde(rename = "1C")]
    C1,
    #[serde(rename = "2D")]
    D2,
}

impl Shape {
    pub fn label(self) -> &'static str {
        match self {
            Shape::None => "-",
            Shape::D0 => "0D",
            Shape::R1 => "1R",
            Shape::C1 => "1C",
            Shape::D2 => "2D",
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationPattern {
    pub shape: Shape,
    /// Classes present among the corrupted cells, ascending.
    pub type_mix: Vec<FloatClass>,
    pub corrupted_cells: usize,
    /// Both `+INF` and `-INF` occur among the corrupted cells.
    pub mixed_sign_inf: bool,
}

impl PropagationPattern {
    fn none() -> Self {
        Self {
            shape: Shape::None,
            type_mix: Vec::new(),
            corrupted_cells: 0,
            mixed_sign_inf: false,
        }
    }
}

fn cell_corrupted(reference: f32, actual: f32, cfg: &EecConfig) -> bool {
    let (a, b) = (
        classify_value(reference, cfg.near_inf),
        classify_value(actual, cfg.near_inf),
    );
    if a != b {
        return true;
    }
    match a {
        FloatClass::NaN => false,
        FloatClass::Inf => reference != actual,
        _ => !((reference - actual).abs() <= cfg.roundoff),
    }
}

struct CellSet {
    cells: Vec<(usize, usize, usize)>,
    classes: Vec<FloatClass>,
    pos_inf: bool,
    neg_inf: bool,
}

impl CellSet {
    fn new() -> Self {
        Self {
            cells: Vec::new(),
            classes: Vec::new(),
            pos_inf: false,
            neg_inf: false,
        }
    }

    fn scan(&mut self, slice: usize, reference: &Matrix, actual: &Matrix, cfg: &EecConfig) {
        for r in 0..reference.rows() {
            for c in 0..reference.cols() {
                let x = actual.get(r, c);
                if cell_corrupted(reference.get(r, c), x, cfg) {
                    self.cells.push((slice, r, c));
                    let class = classify_value(x, cfg.near_inf);
                    if !self.classes.contains(&class) {
                        self.classes.push(class);
                    }
                    self.pos_inf |= x == f32::INFINITY;
                    self.neg_inf |= x == f32::NEG_INFINITY;
                }
            }
        }
    }

    fn pattern(mut self) -> PropagationPattern {
        let shape = match self.cells.as_slice() {
            [] => return PropagationPattern::none(),
            [_] => Shape::D0,
            [(s0, r0, c0), rest @ ..] => {
                if rest.iter().any(|(s, _, _)| s != s0) {
                    Shape::D2
                } else if rest.iter().all(|(_, r, _)| r == r0) {
                    Shape::R1
                } else if rest.iter().all(|(_, _, c)| c == c0) {
                    Shape::C1
                } else {
                    Shape::D2
                }
            }
        };
        self.classes.sort();
        PropagationPattern {
            shape,
            type_mix: self.classes,
            corrupted_cells: self.cells.len(),
            mixed_sign_inf: self.pos_inf && self.neg_inf,
        }
    }
}

/// Shape of the cells where `corrupted` departs from `reference`: a
/// different float class, or a difference above `cfg.roundoff`.
pub fn classify_pattern(reference: &Matrix, corrupted: &Matrix, cfg: &EecConfig) -> Result<PropagationPattern> {
    if reference.shape() != corrupted.shape() {
        return Err(crate::error::shape_err(
            "classify_pattern",
            format!("{:?} vs {:?}", reference.shape(), corrupted.shape()),
        ));
    }
    let mut set = CellSet::new();
    set.scan(0, reference, corrupted, cfg);
    Ok(set.pattern())
}

/// As [`classify_pattern`] across every slice; corruption spread over more
/// than one slice counts as 2D.
pub fn classify_batched(
    reference: &BatchedMatrix,
    corrupted: &BatchedMatrix,
    cfg: &EecConfig,
) -> Result<PropagationPattern> {
    if reference.batches() != corrupted.batches()
        || reference.heads() != corrupted.heads()
        || reference.slice_shape() != corrupted.slice_shape()
    {
        return Err(crate::error::shape_err("classify_batched", "batched shapes differ"));
    }
    let mut set = CellSet::new();
    for (i, (a, b)) in reference.slices().iter().zip(corrupted.slices()).enumerate() {
        set.scan(i, a, b, cfg);
    }
    Ok(set.pattern())
}

/// Intermediate tensors observed by the propagation study, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tensor {
    Q,
    K,
    V,
    AS,
    AP,
    CL,
    O,
}

impl Tensor {
    pub const ALL: [Tensor; 7] = [
        Tensor::Q,
        Tensor::K,
        Tensor::V,
        Tensor::AS,
        Tensor::AP,
        Tensor::CL,
        Tensor::O,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::Q => "Q",
            Tensor::K => "K",
            Tensor::V => "V",
            Tensor::AS => "AS",
            Tensor::AP => "AP",
            Tensor::CL => "CL",
            Tensor::O => "O",
        }
    }

    pub fn of(self, t: &Intermediates) -> &BatchedMatrix {
        match self {
            Tensor::Q => &t.q,
            Tensor::K => &t.k,
            Tensor::V => &t.v,
            Tensor::AS => &t.scores,
            Tensor::AP => &t.probs,
            Tensor::CL => &t.context,
            Tensor::O => &t.output,
        }
    }
}

/// Reproducible model weights and inputs for a run seed.
pub fn model_for_seed(dims: &Dims, seed: u64) -> Result<(AttentionParams, BatchedMatrix)> {
    dims.validate()?;
    let mut rng = seed::rng(seed, STREAM_MODEL, 0);
    let params = AttentionParams::random(dims.d_model, dims.heads, &mut rng)?;
    let xs = (0..dims.batches)
        .map(|_| Matrix::random_normal(dims.seq_len, dims.d_model, 1.0, &mut rng))
        .collect();
    Ok((params, BatchedMatrix::from_slices(dims.batches, 1, xs)?))
}

/// Sites and kinds of the propagation table.
pub const STUDY_SITES: [Site; 5] = [Site::Q, Site::K, Site::V, Site::AS, Site::CL];
pub const STUDY_KINDS: [FaultKind; 3] = [FaultKind::PlusInf, FaultKind::NaN, FaultKind::NearInfBitFlip];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub dims: Dims,
    pub sites: Vec<Site>,
    pub kinds: Vec<FaultKind>,
    pub trials_per_site: usize,
    pub seed: u64,
    /// Cells differing by more than this count as corrupted.
    pub tolerance: f32,
    pub near_inf: f32,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            dims: Dims {
                seq_len: 32,
                d_model: 64,
                heads: 4,
                batches: 2,
            },
            sites: STUDY_SITES.to_vec(),
            kinds: STUDY_KINDS.to_vec(),
            trials_per_site: 200,
            seed: 0,
            tolerance: 1e-6,
            near_inf: EecConfig::DEFAULT_NEAR_INF,
        }
    }
}

/// Aggregated patterns for one (kind, injection site, observed tensor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub kind: FaultKind,
    pub site: Site,
    pub tensor: Tensor,
    pub trials: usize,
    pub shape_counts: BTreeMap<Shape, usize>,
    /// Most frequent shape; ties go to the simpler shape.
    pub modal: Shape,
    /// Union of classes seen among corrupted cells.
    pub type_mix: Vec<FloatClass>,
    pub mixed_sign_inf_trials: usize,
}

impl StudyCell {
    pub fn modal_fraction(&self) -> f64 {
        self.shape_counts.get(&self.modal).copied().unwrap_or(0) as f64 / self.trials.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationTable {
    pub dims: Dims,
    pub trials_per_site: usize,
    pub seed: u64,
    pub cells: Vec<StudyCell>,
}

impl PropagationTable {
    pub fn cell(&self, kind: FaultKind, site: Site, tensor: Tensor) -> Option<&StudyCell> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.site == site && c.tensor == tensor)
    }
}

/// Injects one fault per trial into a plain forward pass and records the
/// pattern it leaves in every intermediate tensor.
pub fn run_propagation_study(cfg: &StudyConfig) -> Result<PropagationTable> {
    if cfg.trials_per_site == 0 {
        return Err(AbftError::InvalidConfig("trials_per_site must be >= 1".into()));
    }
    let dims = cfg.dims;
    let (params, x) = model_for_seed(&dims, cfg.seed)?;
    let clean = forward_traced(&x, &params, &mut |_, _, _, _| {})?;
    let classify_cfg = EecConfig {
        roundoff: cfg.tolerance,
        near_inf: cfg.near_inf,
        correct: EecConfig::DEFAULT_CORRECT,
    };

    let jobs: Vec<(FaultKind, Site)> = cfg
        .kinds
        .iter()
        .flat_map(|&k| cfg.sites.iter().map(move |&s| (k, s)))
        .collect();
    let trials: Vec<(usize, usize)> = (0..jobs.len())
        .flat_map(|j| (0..cfg.trials_per_site).map(move |t| (j, t)))
        .collect();

    let patterns: Vec<Vec<PropagationPattern>> = trials
        .par_iter()
        .map(|&(j, t)| -> Result<Vec<PropagationPattern>> {
            let (kind, site) = jobs[j];
            let mut rng = seed::rng(cfg.seed, STREAM_STUDY, (j * cfg.trials_per_site + t) as u64);
            let flat = rng.random_range(0..dims.site_len(site));
            let element = if kind == FaultKind::NearInfBitFlip {
                resample_near_inf(clean.site(site), &dims, site, flat, cfg.near_inf, &mut rng)
                    .map(|(e, _)| e)
                    .unwrap_or_else(|| Element::from_flat(&dims, site, flat))
            } else {
                Element::from_flat(&dims, site, flat)
            };
            let spec = FaultSpec::new(site, element, kind);
            let faulty = forward_traced(&x, &params, &mut |s, b, h, m| spec.apply_if_matching(s, b, h, m))?;
            Tensor::ALL
                .iter()
                .map(|t| classify_batched(t.of(&clean), t.of(&faulty), &classify_cfg))
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::with_capacity(jobs.len() * Tensor::ALL.len());
    for (j, &(kind, site)) in jobs.iter().enumerate() {
        let per_trial = &patterns[j * cfg.trials_per_site..(j + 1) * cfg.trials_per_site];
        for (ti, &tensor) in Tensor::ALL.iter().enumerate() {
            let mut shape_counts = BTreeMap::new();
            let mut type_mix: Vec<FloatClass> = Vec::new();
            let mut mixed = 0;
            for p in per_trial.iter().map(|ps| &ps[ti]) {
                *shape_counts.entry(p.shape).or_insert(0) += 1;
                for c in &p.type_mix {
                    if !type_mix.contains(c) {
                        type_mix.push(*c);
                    }
                }
                mixed += p.mixed_sign_inf as usize;
            }
            type_mix.sort();
            // max_by_key keeps the last maximum, so walk from the most complex
            // shape down to prefer the simpler one on ties
            let modal = shape_counts
                .iter()
                .rev()
                .max_by_key(|(_, &n)| n)
                .map(|(&s, _)| s)
                .unwrap_or(Shape::None);
            cells.push(StudyCell {
                kind,
                site,
                tensor,
                trials: cfg.trials_per_site,
                shape_counts,
                modal,
                type_mix,
                mixed_sign_inf_trials: mixed,
            });
        }
    }
    Ok(PropagationTable {
        dims,
        trials_per_site: cfg.trials_per_site,
        seed: cfg.seed,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub dims: Dims,
    /// Fraction of each site's elements to corrupt, sampled without
    /// replacement, per fault kind.
    pub fraction: f64,
    pub seed: u64,
    pub protection: ProtectionConfig,
    pub sites: Vec<Site>,
    pub kinds: Vec<FaultKind>,
    /// Also run each fault through the plain forward to record whether the
    /// output would have been left with NaN/INF.
    pub unprotected_comparison: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            dims: StudyConfig::default().dims,
            fraction: 0.10,
            seed: 0,
            protection: ProtectionConfig::default(),
            sites: Site::ALL.to_vec(),
            kinds: FaultKind::ALL.to_vec(),
            unprotected_comparison: true,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.protection.validate()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(AbftError::InvalidConfig(format!(
                "fraction must be in (0, 1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }

    pub fn samples_per_site(&self, site: Site) -> usize {
        let n = self.dims.site_len(site);
        ((self.fraction * n as f64).ceil() as usize).min(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrialOutcome {
    /// Detected, no section failed, and the output is within the roundoff
    /// threshold of the fault-free output.
    Corrected,
    /// Detected but left uncorrected or corrected wrongly.
    Uncorrectable,
    /// No section that ran saw anything.
    Missed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub site: Site,
    pub kind: FaultKind,
    pub element: Element,
    #[serde(with = "f32_lossless")]
    pub injected_value: f32,
    /// Elements replaced before a near-INF flip landed above threshold.
    pub resampled: u32,
    pub detected: bool,
    /// First section whose detection reported a mismatch.
    pub detected_in: Option<SectionId>,
    pub failure_flag: bool,
    pub outcome: TrialOutcome,
    /// Worst `|O - O_ref|` over batches.
    #[serde(with = "f32_lossless")]
    pub residual: f32,
    /// Threshold of the batch holding the worst residual.
    #[serde(with = "f32_lossless")]
    pub residual_bound: f32,
    /// Unprotected output holds NaN/INF, when that comparison was run.
    pub nontrainable_proxy: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub trials: usize,
    pub detected: usize,
    pub corrected: usize,
    pub uncorrectable: usize,
    pub missed: usize,
    pub nontrainable: usize,
    pub compared: usize,
    #[serde(with = "f32_lossless")]
    pub max_residual: f32,
}

impl Tally {
    fn add(&mut self, r: &TrialRecord) {
        self.trials += 1;
        self.detected += r.detected as usize;
        match r.outcome {
            TrialOutcome::Corrected => {
                self.corrected += 1;
                self.max_residual = self.max_residual.max(r.residual);
            }
            TrialOutcome::Uncorrectable => self.uncorrectable += 1,
            TrialOutcome::Missed => self.missed += 1,
        }
        if let Some(p) = r.nontrainable_proxy {
            self.compared += 1;
            self.nontrainable += p as usize;
        }
    }

    fn rate(n: usize, d: usize) -> Option<f64> {
        (d > 0).then(|| n as f64 / d as f64)
    }

    pub fn detection_rate(&self) -> Option<f64> {
        Self::rate(self.detected, self.trials)
    }

    pub fn correction_rate(&self) -> Option<f64> {
        Self::rate(self.corrected, self.trials)
    }

    pub fn nontrainable_proxy_rate(&self) -> Option<f64> {
        Self::rate(self.nontrainable, self.compared)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteKindTally {
    pub site: Site,
    pub kind: FaultKind,
    #[serde(flatten)]
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub dims: Dims,
    pub fraction: f64,
    pub seed: u64,
    pub protection: ProtectionConfig,
    #[serde(flatten)]
    pub totals: Tally,
    /// `None` when there were no trials.
    pub detection_rate: Option<f64>,
    pub correction_rate: Option<f64>,
    pub nontrainable_proxy_rate: Option<f64>,
    /// Largest residual divided by its batch's threshold, over corrected trials.
    pub max_residual_ratio: Option<f64>,
    pub breakdown: Vec<SiteKindTally>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub report: CampaignReport,
    pub trials: Vec<TrialRecord>,
}

/// Corrupts a sample of every site's elements, one fault per protected
/// forward pass, and checks each output against the fault-free one.
pub fn run_detection_campaign(cfg: &CampaignConfig) -> Result<Campaign> {
    cfg.validate()?;
    let dims = cfg.dims;
    let (params, x) = model_for_seed(&dims, cfg.seed)?;
    let clean = forward_traced(&x, &params, &mut |_, _, _, _| {})?;
    // thresholds of the fault-free pass bound the residual of every trial
    let (_, clean_trace) = forward_protected(&x, &params, &ProtectionConfig::default())?;
    let bounds = clean_trace.section(SectionId::SO).thresholds.clone();
    let near_inf = cfg.protection.near_inf;

    let mut plan: Vec<(FaultKind, Site, usize, u64)> = Vec::new();
    for (ki, &kind) in cfg.kinds.iter().enumerate() {
        for (si, &site) in cfg.sites.iter().enumerate() {
            let stream = (ki * Site::ALL.len() + si) as u64;
            let mut rng = seed::rng(cfg.seed, STREAM_CAMPAIGN, stream);
            let picks = index::sample(&mut rng, dims.site_len(site), cfg.samples_per_site(site));
            for (i, flat) in picks.into_iter().enumerate() {
                plan.push((kind, site, flat, seed::derive(cfg.seed, stream + 0x100, i as u64)));
            }
        }
    }

    let trials: Vec<TrialRecord> = plan
        .par_iter()
        .enumerate()
        .map(|(trial, &(kind, site, flat, trial_seed))| {
            let mut rng = seed::rng(trial_seed, 0, 0);
            let (element, resampled) = if kind == FaultKind::NearInfBitFlip {
                resample_near_inf(clean.site(site), &dims, site, flat, near_inf, &mut rng)
                    .unwrap_or((Element::from_flat(&dims, site, flat), 0))
            } else {
                (Element::from_flat(&dims, site, flat), 0)
            };
            let spec = FaultSpec::new(site, element, kind);
            let original = clean
                .site(site)
                .get(element.batch, element.head)
                .get(element.row, element.col);
            run_trial(
                trial,
                &spec,
                kind.apply(original),
                resampled,
                &x,
                &params,
                cfg,
                &clean.output,
                &bounds,
            )
        })
        .collect::<Result<_>>()?;

    let mut totals = Tally::default();
    let mut cells: BTreeMap<(Site, FaultKind), Tally> = BTreeMap::new();
    let mut ratio: Option<f64> = None;
    for r in &trials {
        totals.add(r);
        cells.entry((r.site, r.kind)).or_default().add(r);
        if r.outcome == TrialOutcome::Corrected {
            let q = r.residual as f64 / r.residual_bound as f64;
            ratio = Some(ratio.map_or(q, |m: f64| m.max(q)));
        }
    }
    let breakdown = cells
        .into_iter()
        .map(|((site, kind), tally)| SiteKindTally { site, kind, tally })
        .collect();
    Ok(Campaign {
        report: CampaignReport {
            dims,
            fraction: cfg.fraction,
            seed: cfg.seed,
            protection: cfg.protection,
            detection_rate: totals.detection_rate(),
            correction_rate: totals.correction_rate(),
            nontrainable_proxy_rate: totals.nontrainable_proxy_rate(),
            max_residual_ratio: ratio,
            totals,
            breakdown,
        },
        trials,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    trial: usize,
    spec: &FaultSpec,
    injected_value: f32,
    resampled: u32,
    x: &BatchedMatrix,
    params: &AttentionParams,
    cfg: &CampaignConfig,
    reference: &BatchedMatrix,
    bounds: &[f32],
) -> Result<TrialRecord> {
    let mut hook = |s: Site, b: usize, h: usize, m: &mut Matrix| spec.apply_if_matching(s, b, h, m);
    let (out, trace) = forward_protected_with_hook(x, params, &cfg.protection, &mut hook)?;
    let detected_in = trace.sections.iter().find(|s| s.detected()).map(|s| s.section);
    let detected = detected_in.is_some();

    let mut residual = 0.0f32;
    let mut residual_bound = bounds[0];
    let mut worst = -1.0f64;
    let mut within = true;
    for (b, bound) in bounds.iter().enumerate() {
        let r = out.get(b, 0).max_abs_diff(reference.get(b, 0));
        let q = if r.is_nan() {
            f64::INFINITY
        } else {
            r as f64 / *bound as f64
        };
        within &= r <= *bound;
        if q > worst {
            worst = q;
            residual = if r.is_nan() { f32::INFINITY } else { r };
            residual_bound = *bound;
        }
    }
    let outcome = if !detected {
        TrialOutcome::Missed
    } else if !trace.failed && within {
        TrialOutcome::Corrected
    } else {
        TrialOutcome::Uncorrectable
    };

    let nontrainable_proxy = if cfg.unprotected_comparison {
        let plain = forward_traced(x, params, &mut hook)?;
        Some(plain.output.has_non_finite())
    } else {
        None
    };
    Ok(TrialRecord {
        trial,
        site: spec.site,
        kind: spec.kind,
        element: spec.element,
        injected_value,
        resampled,
        detected,
        detected_in,
        failure_flag: trace.failed,
        outcome,
        residual,
        residual_bound,
        nontrainable_proxy,
    })
}
