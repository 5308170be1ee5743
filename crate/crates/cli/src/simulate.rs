//! `propfit simulate`: Monte Carlo bias study against the formula biases.

use propfit_core::simulation::{
    compare_bias_table, run_study, BiasTable, SimDesign, SimModel, SimSummary,
};
use serde::Serialize;

use crate::args::SimulateArgs;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const DEFAULT_REPLICATES: usize = 1000;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateReport {
    pub design: SimDesign,
    pub summary: SimSummary,
    pub tables: Vec<BiasTable>,
}

/// The configured design with command-line overrides applied.
pub fn resolve_design(args: &SimulateArgs, config: &RunConfig) -> Result<SimDesign> {
    let mut design = match &config.simulation {
        Some(d) => d.clone(),
        None => SimDesign::bleach_default(
            args.replicates.unwrap_or(DEFAULT_REPLICATES),
            args.seed.unwrap_or(DEFAULT_SEED),
        )?,
    };
    if let Some(seed) = args.seed {
        design.master_seed = seed;
    }
    if let Some(r) = args.replicates {
        design.replicates = r;
    }
    if let Some(m) = args.method {
        design.methods = m.methods();
    } else if config.simulation.is_none() {
        if let Some(methods) = &config.methods {
            design.methods = methods.clone();
        }
    }
    design
        .validate()
        .map_err(|e| CliError::Input(e.to_string()))?;
    Ok(design)
}

/// Runs the study on a pool of `threads` workers (rayon's default when `None`).
pub fn run_simulate(design: SimDesign, threads: Option<usize>) -> Result<SimulateReport> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let summary = pool.build()?.install(|| run_study(&design))?;
    let quantities: Vec<String> = match design.model {
        SimModel::PartialBleach => vec!["gamma".to_string()],
        SimModel::SingleCurve(_) => summary.quantities.clone(),
    };
    let tables = quantities
        .iter()
        .map(|q| compare_bias_table(&summary, q))
        .collect::<propfit_core::Result<Vec<_>>>()?;
    Ok(SimulateReport {
        design,
        summary,
        tables,
    })
}

pub fn render_simulate(report: &SimulateReport) -> String {
    let d = &report.design;
    let mut out = format!(
        "Monte Carlo study: R = {}, seed = {}, antithetic = {}\n",
        d.replicates, d.master_seed, d.antithetic
    );
    for t in &report.tables {
        out.push('\n');
        out.push_str(&t.render_text());
    }
    let rejected: usize = report
        .summary
        .entries
        .iter()
        .map(|e| e.rejected_count)
        .max()
        .unwrap_or(0);
    let failed: usize = report
        .summary
        .entries
        .iter()
        .map(|e| e.failure_count)
        .max()
        .unwrap_or(0);
    if rejected > 0 || failed > 0 {
        out.push_str(&format!(
            "\nworst cell: {rejected} rejected draws, {failed} failed fits\n"
        ));
    }
    out
}
