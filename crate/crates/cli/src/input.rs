use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use propfit_core::model::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DEFAULT_CURVE: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRow {
    pub curve: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Deserialize)]
struct RawRow {
    #[serde(default)]
    curve: Option<String>,
    x: f64,
    y: f64,
}

/// Observations read from CSV (`curve,x,y`; `curve` may be omitted).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InputTable {
    pub rows: Vec<InputRow>,
}

impl InputTable {
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        for col in ["x", "y"] {
            if !headers.iter().any(|h| h == col) {
                return Err(CliError::Input(format!(
                    "CSV header lacks a `{col}` column"
                )));
            }
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<RawRow>().enumerate() {
            let raw = rec?;
            if !raw.x.is_finite() || !raw.y.is_finite() {
                return Err(CliError::Input(format!(
                    "data row {}: x and y must be finite",
                    i + 1
                )));
            }
            rows.push(InputRow {
                curve: raw
                    .curve
                    .filter(|c| !c.is_empty())
                    .unwrap_or_else(|| DEFAULT_CURVE.to_string()),
                x: raw.x,
                y: raw.y,
            });
        }
        if rows.is_empty() {
            return Err(CliError::Input("CSV has no data rows".into()));
        }
        Ok(Self { rows })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read(file)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Curve labels in order of first appearance.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.curve) {
                out.push(r.curve.clone());
            }
        }
        out
    }

    pub fn dataset(&self, label: &str) -> Result<Dataset> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter(|r| r.curve == label)
            .map(|r| (r.x, r.y))
            .unzip();
        Ok(Dataset::from_xy(&xs, &ys)?)
    }
}
