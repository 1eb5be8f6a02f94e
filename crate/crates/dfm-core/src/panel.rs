//! Dated return panels: rows are observations (dates or synthetic row ids),
//! columns are assets. This is the single ingestion format for both real and
//! simulated data.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DfmError, Result};
use crate::linalg::Mat;
use crate::rng::fnv1a_64;

/// A panel of asset returns plus optional market-cap metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnPanel {
    dates: Vec<String>,
    assets: Vec<String>,
    values: Mat,
    market_caps: Option<Vec<f64>>,
}

impl ReturnPanel {
    pub fn new(dates: Vec<String>, assets: Vec<String>, values: Mat) -> Result<Self> {
        if values.rows() != dates.len() || values.cols() != assets.len() {
            return Err(DfmError::InvalidInput(format!(
                "panel shape {}x{} does not match {} dates x {} assets",
                values.rows(),
                values.cols(),
                dates.len(),
                assets.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for a in &assets {
            if !seen.insert(a.as_str()) {
                return Err(DfmError::InvalidInput(format!(
                    "duplicate asset id '{a}'"
                )));
            }
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(DfmError::InvalidInput(
                "panel values must be finite".into(),
            ));
        }
        Ok(ReturnPanel {
            dates,
            assets,
            values,
            market_caps: None,
        })
    }

    /// Panel with synthetic row ids `0..n` and asset ids `a0000..`.
    pub fn synthetic(values: Mat) -> Self {
        let dates = (0..values.rows()).map(|i| i.to_string()).collect();
        let assets = (0..values.cols()).map(|j| format!("a{j:04}")).collect();
        ReturnPanel {
            dates,
            assets,
            values,
            market_caps: None,
        }
    }

    pub fn with_market_caps(mut self, caps: Vec<f64>) -> Result<Self> {
        if caps.len() != self.n_assets() {
            return Err(DfmError::InvalidInput(format!(
                "{} market caps for {} assets",
                caps.len(),
                self.n_assets()
            )));
        }
        self.market_caps = Some(caps);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.values.rows()
    }

    pub fn n_assets(&self) -> usize {
        self.values.cols()
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn market_caps(&self) -> Option<&[f64]> {
        self.market_caps.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    /// Contiguous row range `[start, end)` as a new panel.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<ReturnPanel> {
        if start >= end || end > self.n_rows() {
            return Err(DfmError::InvalidInput(format!(
                "row slice {start}..{end} out of bounds for {} rows",
                self.n_rows()
            )));
        }
        let mut m = Mat::zeros(end - start, self.n_assets());
        for i in start..end {
            m.row_mut(i - start).copy_from_slice(self.row(i));
        }
        let mut p = ReturnPanel::new(
            self.dates[start..end].to_vec(),
            self.assets.clone(),
            m,
        )?;
        p.market_caps = self.market_caps.clone();
        Ok(p)
    }

    /// Write `date, asset..., asset` CSV with full round-trip float precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.assets.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![self.dates[i].clone()];
            rec.extend(self.row(i).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Strict CSV reader: header row of asset ids (optionally led by a date
    /// column), fully numeric body. Preprocessing (missing values,
    /// winsorization) is the harness's job, not this reader's.
    pub fn read_csv(path: &Path) -> Result<ReturnPanel> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.is_empty() {
            return Err(DfmError::Parse {
                line: 1,
                msg: "empty header".into(),
            });
        }
        let has_date = headers
            .get(0)
            .map(|h| h.eq_ignore_ascii_case("date") || h.is_empty())
            .unwrap_or(false);
        let first_col = usize::from(has_date);
        let assets: Vec<String> = headers.iter().skip(first_col).map(String::from).collect();
        let mut dates = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let line = idx + 2;
            let rec = rec?;
            if rec.len() != headers.len() {
                return Err(DfmError::Parse {
                    line,
                    msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
                });
            }
            dates.push(if has_date {
                rec.get(0).unwrap_or("").to_string()
            } else {
                idx.to_string()
            });
            let mut row = Vec::with_capacity(assets.len());
            for (j, field) in rec.iter().skip(first_col).enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| DfmError::Parse {
                    line,
                    msg: format!("field '{}' (column {}) is not numeric", field, j + 1),
                })?;
                row.push(v);
            }
            rows.push(row);
        }
        let values = Mat::from_rows(&rows)?;
        ReturnPanel::new(dates, assets, values)
    }
}

/// Provenance sidecar written next to generated panels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PanelSidecar {
    pub spec_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market_caps: Option<Vec<f64>>,
}

impl PanelSidecar {
    pub fn new(spec_json: &serde_json::Value, seed: u64, config: serde_json::Value) -> Self {
        let spec_hash = format!("{:016x}", fnv1a_64(spec_json.to_string().as_bytes()));
        PanelSidecar {
            spec_hash,
            seed,
            config,
            market_caps: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<PanelSidecar> {
        let s = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Sidecar path convention: `panel.csv` -> `panel.sidecar.json`.
pub fn sidecar_path(panel_path: &Path) -> std::path::PathBuf {
    panel_path.with_extension("sidecar.json")
}
