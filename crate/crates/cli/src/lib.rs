//! Command-line front end for proportional-error regression.

pub mod args;
pub mod check;
pub mod config;
pub mod error;
pub mod fit;
pub mod input;
pub mod output;
pub mod simulate;

use args::{Cli, Command, OutputFormat};
use config::RunConfig;
use error::{exit, Result};
use output::{emit, to_json, Rendered};

/// Runs one command and returns its exit code. Errors map to
/// [`exit::INPUT`] in the caller.
pub fn run(cli: &Cli) -> Result<u8> {
    let config = RunConfig::load_or_default(cli.config.as_deref())?;
    let format = cli.format.or(config.format).unwrap_or(OutputFormat::Text);
    let (rendered, code) = match &cli.command {
        Command::Fit(a) => {
            let report = fit::run_fit(a, &config)?;
            let code = if report.all_failed() {
                exit::ALL_FITS_FAILED
            } else {
                exit::OK
            };
            let rendered = Rendered {
                text: fit::render_fit(&report),
                json: to_json(&report)?,
            };
            (rendered, code)
        }
        Command::Simulate(a) => {
            let design = simulate::resolve_design(a, &config)?;
            let report = simulate::run_simulate(design, cli.threads)?;
            let rendered = Rendered {
                text: simulate::render_simulate(&report),
                json: to_json(&report)?,
            };
            (rendered, exit::OK)
        }
        Command::Check(a) => {
            let report = check::run_check(a)?;
            let code = if report.passed {
                exit::OK
            } else {
                exit::CHECK_FAILED
            };
            let rendered = Rendered {
                text: check::render_check(&report),
                json: to_json(&report)?,
            };
            (rendered, code)
        }
    };
    emit(&rendered, format, cli.out.as_deref())?;
    Ok(code)
}
