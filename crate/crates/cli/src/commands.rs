use std::path::PathBuf;

use attn_abft::attention::SectionId;
use attn_abft::bench::{bench_forward, BenchReport};
use attn_abft::coverage::{
    attention_profiles, monte_carlo_validate, optimize_for_failure, ErrorRateProfile, HConvention, Model,
    MonteCarloReport, OptimizationResult, SectionProfile,
};
use attn_abft::fault::{run_detection_campaign, run_propagation_study, Shape, Tensor};
use attn_abft::seed;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::{write_csv, write_json};
use crate::CliError;

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

#[derive(Serialize)]
struct StudyMatrixRow {
    kind: String,
    site: String,
    #[serde(rename = "Q")]
    q: &'static str,
    #[serde(rename = "K")]
    k: &'static str,
    #[serde(rename = "V")]
    v: &'static str,
    #[serde(rename = "AS")]
    scores: &'static str,
    #[serde(rename = "AP")]
    probs: &'static str,
    #[serde(rename = "CL")]
    context: &'static str,
    #[serde(rename = "O")]
    output: &'static str,
}

#[derive(Serialize)]
struct StudyCellRow {
    kind: String,
    site: String,
    tensor: &'static str,
    trials: usize,
    modal: &'static str,
    modal_fraction: f64,
    n_none: usize,
    n_0d: usize,
    n_1r: usize,
    n_1c: usize,
    n_2d: usize,
    type_mix: String,
    mixed_sign_inf_trials: usize,
}

pub fn study(cfg: &RunConfig) -> Result<(), CliError> {
    let table = run_propagation_study(&cfg.study_config())?;
    let mut matrix = Vec::new();
    let mut cells = Vec::new();
    println!("kind  site  Q   K   V   AS  AP  CL  O");
    for &kind in &cfg.study.kinds {
        for &site in &cfg.study.sites {
            let label = |t: Tensor| table.cell(kind, site, t).map_or("?", |c| c.modal.label());
            let row = StudyMatrixRow {
                kind: kind.to_string(),
                site: site.to_string(),
                q: label(Tensor::Q),
                k: label(Tensor::K),
                v: label(Tensor::V),
                scores: label(Tensor::AS),
                probs: label(Tensor::AP),
                context: label(Tensor::CL),
                output: label(Tensor::O),
            };
            println!(
                "{:<5} {:<5} {:<3} {:<3} {:<3} {:<3} {:<3} {:<3} {}",
                row.kind, row.site, row.q, row.k, row.v, row.scores, row.probs, row.context, row.output
            );
            matrix.push(row);
        }
    }
    for c in &table.cells {
        let n = |s: Shape| c.shape_counts.get(&s).copied().unwrap_or(0);
        cells.push(StudyCellRow {
            kind: c.kind.to_string(),
            site: c.site.to_string(),
            tensor: c.tensor.name(),
            trials: c.trials,
            modal: c.modal.label(),
            modal_fraction: c.modal_fraction(),
            n_none: n(Shape::None),
            n_0d: n(Shape::D0),
            n_1r: n(Shape::R1),
            n_1c: n(Shape::C1),
            n_2d: n(Shape::D2),
            type_mix: c
                .type_mix
                .iter()
                .map(|t| format!("{t:?}"))
                .collect::<Vec<_>>()
                .join("|"),
            mixed_sign_inf_trials: c.mixed_sign_inf_trials,
        });
    }
    let mut paths = Vec::new();
    if cfg.format.json() {
        paths.push(write_json(&cfg.out_dir, "study.json", &table)?);
    }
    if cfg.format.csv() {
        paths.push(write_csv(&cfg.out_dir, "study.csv", &matrix)?);
        paths.push(write_csv(&cfg.out_dir, "study_cells.csv", &cells)?);
    }
    announce(&paths);
    Ok(())
}

#[derive(Serialize)]
struct TrialRow {
    trial: usize,
    site: String,
    kind: String,
    batch: usize,
    head: usize,
    row: usize,
    col: usize,
    injected_value: f32,
    resampled: u32,
    detected: bool,
    detected_in: Option<&'static str>,
    failure_flag: bool,
    outcome: String,
    residual: f32,
    residual_bound: f32,
    nontrainable_proxy: Option<bool>,
}

#[derive(Serialize)]
struct BreakdownRow {
    site: String,
    kind: String,
    trials: usize,
    detected: usize,
    corrected: usize,
    uncorrectable: usize,
    missed: usize,
    nontrainable: usize,
    compared: usize,
    max_residual: f32,
}

fn rate(r: Option<f64>) -> String {
    r.map_or("undefined".into(), |v| format!("{v:.4}"))
}

pub fn campaign(cfg: &RunConfig) -> Result<(), CliError> {
    let out = run_detection_campaign(&cfg.campaign_config())?;
    let r = &out.report;
    println!(
        "trials={} detection_rate={} correction_rate={} nontrainable_proxy_rate={} max_residual={:e} max_residual/bound={}",
        r.totals.trials,
        rate(r.detection_rate),
        rate(r.correction_rate),
        rate(r.nontrainable_proxy_rate),
        r.totals.max_residual,
        rate(r.max_residual_ratio),
    );
    let mut paths = Vec::new();
    if cfg.format.json() {
        paths.push(write_json(&cfg.out_dir, "campaign.json", r)?);
    }
    if cfg.format.csv() {
        let breakdown: Vec<BreakdownRow> = r
            .breakdown
            .iter()
            .map(|b| BreakdownRow {
                site: b.site.to_string(),
                kind: b.kind.to_string(),
                trials: b.tally.trials,
                detected: b.tally.detected,
                corrected: b.tally.corrected,
                uncorrectable: b.tally.uncorrectable,
                missed: b.tally.missed,
                nontrainable: b.tally.nontrainable,
                compared: b.tally.compared,
                max_residual: b.tally.max_residual,
            })
            .collect();
        paths.push(write_csv(&cfg.out_dir, "campaign_breakdown.csv", &breakdown)?);
        if cfg.campaign.write_trials {
            let rows: Vec<TrialRow> = out
                .trials
                .iter()
                .map(|t| TrialRow {
                    trial: t.trial,
                    site: t.site.to_string(),
                    kind: t.kind.to_string(),
                    batch: t.element.batch,
                    head: t.element.head,
                    row: t.element.row,
                    col: t.element.col,
                    injected_value: t.injected_value,
                    resampled: t.resampled,
                    detected: t.detected,
                    detected_in: t.detected_in.map(SectionId::name),
                    failure_flag: t.failure_flag,
                    outcome: format!("{:?}", t.outcome),
                    residual: t.residual,
                    residual_bound: t.residual_bound,
                    nontrainable_proxy: t.nontrainable_proxy,
                })
                .collect();
            paths.push(write_csv(&cfg.out_dir, "campaign_trials.csv", &rows)?);
        }
    }
    announce(&paths);
    if r.totals.uncorrectable > 0 {
        return Err(CliError::Uncorrectable(format!(
            "{} of {} trials were detected but not corrected",
            r.totals.uncorrectable, r.totals.trials
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeRun {
    pub rate_per_1e25_flops: f64,
    pub result: OptimizationResult,
    pub monte_carlo: Option<MonteCarloReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub model: Model,
    pub h_convention: HConvention,
    pub failure_target: f64,
    pub flop_scale: f64,
    pub profiles: Vec<SectionProfile>,
    pub runs: Vec<OptimizeRun>,
}

#[derive(Serialize)]
struct OptimizeRow {
    rate_per_1e25_flops: f64,
    f_as: f64,
    f_cl: f64,
    f_o: f64,
    cost: f64,
    analytic_failure: f64,
    approx_failure: f64,
    target_failure: f64,
    infeasible: bool,
    mc_trials: Option<u64>,
    mc_fc: Option<f64>,
    mc_std_error: Option<f64>,
    analytic_fc: f64,
}

pub fn optimize(cfg: &RunConfig) -> Result<(), CliError> {
    let o = &cfg.optimize;
    let profiles = match &o.profiles {
        Some(p) => p.clone(),
        None => attention_profiles(&cfg.dims, o.model, o.flop_scale)?,
    };
    let mut runs = Vec::new();
    for (i, &rate) in o.rates_per_1e25_flops.iter().enumerate() {
        let rates = ErrorRateProfile::per_1e25_flops(rate);
        let result = optimize_for_failure(&profiles, &rates, o.failure_target, o.h_convention)?;
        let monte_carlo = if o.mc_trials > 0 {
            Some(monte_carlo_validate(
                &result.frequencies,
                &profiles,
                &rates,
                o.h_convention,
                o.mc_trials,
                seed::derive(cfg.seed, 0x0B7, i as u64),
            )?)
        } else {
            None
        };
        let f = result.frequencies;
        println!(
            "rate={rate}/1e25 flops  f_AS={:.4} f_CL={:.4} f_O={:.4}  failure={:.3e} (target {:.3e}){}",
            f.s_as,
            f.s_cl,
            f.s_o,
            result.analytic_failure,
            o.failure_target,
            if result.infeasible { "  INFEASIBLE" } else { "" }
        );
        runs.push(OptimizeRun {
            rate_per_1e25_flops: rate,
            result,
            monte_carlo,
        });
    }
    let report = OptimizeReport {
        model: o.model,
        h_convention: o.h_convention,
        failure_target: o.failure_target,
        flop_scale: o.flop_scale,
        profiles,
        runs,
    };
    let mut paths = Vec::new();
    if cfg.format.json() {
        paths.push(write_json(&cfg.out_dir, "optimize.json", &report)?);
    }
    if cfg.format.csv() {
        let rows: Vec<OptimizeRow> = report
            .runs
            .iter()
            .map(|r| OptimizeRow {
                rate_per_1e25_flops: r.rate_per_1e25_flops,
                f_as: r.result.frequencies.s_as,
                f_cl: r.result.frequencies.s_cl,
                f_o: r.result.frequencies.s_o,
                cost: r.result.cost,
                analytic_failure: r.result.analytic_failure,
                approx_failure: r.result.approx_failure,
                target_failure: r.result.target_failure,
                infeasible: r.result.infeasible,
                mc_trials: r.monte_carlo.as_ref().map(|m| m.trials),
                mc_fc: r.monte_carlo.as_ref().map(|m| m.fc),
                mc_std_error: r.monte_carlo.as_ref().map(|m| m.std_error),
                analytic_fc: r.result.analytic_fc,
            })
            .collect();
        paths.push(write_csv(&cfg.out_dir, "optimize.csv", &rows)?);
    }
    announce(&paths);
    let infeasible: Vec<f64> = report
        .runs
        .iter()
        .filter(|r| r.result.infeasible)
        .map(|r| r.rate_per_1e25_flops)
        .collect();
    if !infeasible.is_empty() {
        return Err(CliError::Infeasible(format!(
            "target not reachable even with every section always checked at rates {infeasible:?}"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    section: &'static str,
    model_flops: u64,
    instrumented_flops: u64,
    ratio: f64,
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let report: BenchReport = bench_forward(&cfg.dims, cfg.bench.reps, cfg.seed)?;
    println!(
        "unprotected median {:.3e}s  protected median {:.3e}s  ratio {:.3} (per-rep mean {:.3}, variance {:.3e})",
        report.unprotected.median_s, report.protected.median_s, report.ratio, report.ratio_mean, report.ratio_variance
    );
    for s in &report.sections {
        println!(
            "{}: counted {} flops, model {} (model/counted {:.3})",
            s.section, s.instrumented_flops, s.model_flops, s.ratio
        );
    }
    let mut paths = Vec::new();
    if cfg.format.json() {
        paths.push(write_json(&cfg.out_dir, "bench.json", &report)?);
    }
    if cfg.format.csv() {
        let rows: Vec<BenchRow> = report
            .sections
            .iter()
            .map(|s| BenchRow {
                section: s.section.name(),
                model_flops: s.model_flops,
                instrumented_flops: s.instrumented_flops,
                ratio: s.ratio,
            })
            .collect();
        paths.push(write_csv(&cfg.out_dir, "bench.csv", &rows)?);
    }
    announce(&paths);
    Ok(())
}
