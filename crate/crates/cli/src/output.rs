use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::args::OutputFormat;
use crate::error::{CliError, Result};

pub const SIGNIFICANT_DIGITS: usize = 12;

pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .unwrap_or(x)
}

/// Rounds every floating-point number in a JSON tree to 12 significant digits.
pub fn round_value(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|x| serde_json::Number::from_f64(round_sig(x)))
            .map_or(Value::Null, Value::Number),
        Value::Array(a) => Value::Array(a.into_iter().map(round_value).collect()),
        Value::Object(o) => {
            Value::Object(o.into_iter().map(|(k, v)| (k, round_value(v))).collect())
        }
        other => other,
    }
}

pub fn to_json<T: Serialize>(report: &T) -> Result<String> {
    let value = serde_json::to_value(report).map_err(|e| CliError::Input(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&round_value(value))
        .map_err(|e| CliError::Input(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Rendered result of one command.
pub struct Rendered {
    pub text: String,
    pub json: String,
}

fn json_path(out: &Path) -> PathBuf {
    let candidate = out.with_extension("json");
    if candidate == out {
        out.with_extension("json.json")
    } else {
        candidate
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Emits the rendering per `format`. With `both` and a file target, JSON goes
/// to the same path with a `.json` extension.
pub fn emit(rendered: &Rendered, format: OutputFormat, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => match format {
            OutputFormat::Text => write_file(path, &rendered.text),
            OutputFormat::Json => write_file(path, &rendered.json),
            OutputFormat::Both => {
                write_file(path, &rendered.text)?;
                write_file(&json_path(path), &rendered.json)
            }
        },
        None => {
            let mut stdout = std::io::stdout().lock();
            let body = match format {
                OutputFormat::Text => rendered.text.clone(),
                OutputFormat::Json => rendered.json.clone(),
                OutputFormat::Both => format!("{}\n{}", rendered.text, rendered.json),
            };
            stdout
                .write_all(body.as_bytes())
                .map_err(|source| CliError::Write {
                    path: PathBuf::from("<stdout>"),
                    source,
                })
        }
    }
}
