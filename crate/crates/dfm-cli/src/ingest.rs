//! CSV ingestion with preprocessing: missing-value handling, optional
//! per-window standardization, and seeded winsorization by resampling.
//!
//! Rules applied in order:
//! 1. cells parse as numbers; empty / `NA` / `NaN` / `null` mark missing;
//! 2. columns whose missing fraction exceeds the threshold are dropped
//!    (all-missing columns always drop, with a warning);
//! 3. surviving missing cells are filled with the column mean of observed
//!    values, leaving the mask empty;
//! 4. winsorization (optional): values beyond the symmetric per-asset
//!    quantiles are replaced by a uniformly resampled non-extreme value of
//!    matching sign (clamped to the quantile when no such value exists);
//! 5. standardization (optional): subtract the column mean, divide by the
//!    column standard deviation; zero-variance columns drop with a warning.

use std::path::Path;

use rand::Rng;

use dfm_core::error::{DfmError, Result};
use dfm_core::linalg::Mat;
use dfm_core::panel::{sidecar_path, PanelSidecar, ReturnPanel};
use dfm_core::rng::keyed_rng;

use crate::config::PreprocessSection;

/// Scale information removed by standardization, needed to map moments of
/// generated data back to return units.
#[derive(Clone, Debug)]
pub struct ColumnScaling {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub dropped_columns: Vec<String>,
    pub warnings: Vec<String>,
    pub scaling: Option<ColumnScaling>,
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty()
        || f.eq_ignore_ascii_case("na")
        || f.eq_ignore_ascii_case("nan")
        || f.eq_ignore_ascii_case("null")
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Winsorize one column in place: extremes are replaced by a seeded uniform
/// draw from the non-extreme values of matching sign.
pub fn winsorize_column(col: &mut [f64], level: f64, seed: u64, col_idx: u64) {
    let mut sorted: Vec<f64> = col.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = quantile_sorted(&sorted, level);
    let hi = quantile_sorted(&sorted, 1.0 - level);
    let keep: Vec<f64> = col
        .iter()
        .copied()
        .filter(|&v| v >= lo && v <= hi)
        .collect();
    for (row, v) in col.iter_mut().enumerate() {
        if *v < lo || *v > hi {
            let same_sign: Vec<f64> = keep
                .iter()
                .copied()
                .filter(|&x| (x >= 0.0) == (*v >= 0.0))
                .collect();
            let mut rng = keyed_rng(seed, &[0x77696e, col_idx, row as u64]);
            *v = if same_sign.is_empty() {
                if *v < lo {
                    lo
                } else {
                    hi
                }
            } else {
                same_sign[rng.random_range(0..same_sign.len())]
            };
        }
    }
}

/// Apply winsorization and/or standardization to a panel copy, returning the
/// processed panel and the removed column scaling (when standardizing).
pub fn preprocess_values(
    panel: &ReturnPanel,
    cfg: &PreprocessSection,
    seed: u64,
) -> Result<(ReturnPanel, Option<ColumnScaling>)> {
    let n = panel.n_rows();
    let d = panel.n_assets();
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| panel.values().col(j)).collect();
    if cfg.winsorize {
        for (j, col) in cols.iter_mut().enumerate() {
            winsorize_column(col, cfg.winsor_level, seed, j as u64);
        }
    }
    let scaling = if cfg.standardize {
        let mut means = Vec::with_capacity(d);
        let mut stds = Vec::with_capacity(d);
        for col in cols.iter_mut() {
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (n as f64 - 1.0).max(1.0);
            let std = var.sqrt();
            if std <= 0.0 {
                return Err(DfmError::DegenerateInput(
                    "constant column under standardization".into(),
                ));
            }
            for v in col.iter_mut() {
                *v = (*v - mean) / std;
            }
            means.push(mean);
            stds.push(std);
        }
        Some(ColumnScaling { means, stds })
    } else {
        None
    };
    let mut values = Mat::zeros(n, d);
    for (j, col) in cols.iter().enumerate() {
        values.set_col(j, col);
    }
    let mut out = ReturnPanel::new(panel.dates().to_vec(), panel.assets().to_vec(), values)?;
    if let Some(caps) = panel.market_caps() {
        out = out.with_market_caps(caps.to_vec())?;
    }
    Ok((out, scaling))
}

/// Ingest a CSV return panel with the configured preprocessing. Columns with
/// too many missing values are dropped (standardization drops constant
/// columns too); dates must be monotone.
pub fn ingest_csv(
    path: &Path,
    cfg: &PreprocessSection,
    seed: u64,
) -> Result<(ReturnPanel, IngestReport)> {
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
    let mut dates: Vec<String> = Vec::new();
    let mut raw: Vec<Vec<Option<f64>>> = Vec::new();
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
            if is_missing(field) {
                row.push(None);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| DfmError::Parse {
                    line,
                    msg: format!("field '{}' (column {}) is not numeric", field, j + 1),
                })?;
                row.push(Some(v));
            }
        }
        raw.push(row);
    }
    if raw.is_empty() {
        return Err(DfmError::InsufficientData("CSV has no data rows".into()));
    }
    check_monotone_dates(&dates)?;

    let n = raw.len();
    let mut report = IngestReport::default();

    // Missing-value pass: decide survivors, fill the rest with column means.
    let mut kept_assets: Vec<String> = Vec::new();
    let mut kept_cols: Vec<Vec<f64>> = Vec::new();
    for (j, asset) in assets.iter().enumerate() {
        let missing = raw.iter().filter(|row| row[j].is_none()).count();
        let frac = missing as f64 / n as f64;
        if missing == n {
            report
                .warnings
                .push(format!("column '{asset}' is entirely missing; dropped"));
            report.dropped_columns.push(asset.clone());
            continue;
        }
        if frac > cfg.missing_threshold {
            report.warnings.push(format!(
                "column '{asset}' has {:.1}% missing values (> {:.1}%); dropped",
                100.0 * frac,
                100.0 * cfg.missing_threshold
            ));
            report.dropped_columns.push(asset.clone());
            continue;
        }
        let observed: Vec<f64> = raw.iter().filter_map(|row| row[j]).collect();
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let col: Vec<f64> = raw.iter().map(|row| row[j].unwrap_or(mean)).collect();
        kept_assets.push(asset.clone());
        kept_cols.push(col);
    }
    if kept_assets.is_empty() {
        return Err(DfmError::InsufficientData(
            "no columns survive the missing-value threshold".into(),
        ));
    }

    // Constant-column guard under standardization.
    if cfg.standardize {
        let mut retained_assets = Vec::new();
        let mut retained_cols = Vec::new();
        for (asset, col) in kept_assets.iter().zip(kept_cols.iter()) {
            let mean = col.iter().sum::<f64>() / n as f64;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            if var <= 0.0 {
                report.warnings.push(format!(
                    "column '{asset}' is constant under standardization; dropped"
                ));
                report.dropped_columns.push(asset.clone());
            } else {
                retained_assets.push(asset.clone());
                retained_cols.push(col.clone());
            }
        }
        kept_assets = retained_assets;
        kept_cols = retained_cols;
        if kept_assets.is_empty() {
            return Err(DfmError::InsufficientData(
                "no columns survive the zero-variance guard".into(),
            ));
        }
    }

    let mut values = Mat::zeros(n, kept_assets.len());
    for (j, col) in kept_cols.iter().enumerate() {
        values.set_col(j, col);
    }
    let mut panel = ReturnPanel::new(dates, kept_assets.clone(), values)?;

    // Attach market caps from a sidecar when present, respecting drops.
    let sc_path = sidecar_path(path);
    if sc_path.exists() {
        if let Ok(sc) = PanelSidecar::read(&sc_path) {
            if let Some(caps) = sc.market_caps {
                if caps.len() == assets.len() {
                    let kept_caps: Vec<f64> = assets
                        .iter()
                        .zip(caps)
                        .filter(|(a, _)| kept_assets.contains(a))
                        .map(|(_, c)| c)
                        .collect();
                    panel = panel.with_market_caps(kept_caps)?;
                } else {
                    report.warnings.push(
                        "sidecar market_caps length mismatch; ignored".to_string(),
                    );
                }
            }
        }
    }

    let (panel, scaling) = preprocess_values(&panel, cfg, seed)?;
    report.scaling = scaling;
    Ok((panel, report))
}

fn check_monotone_dates(dates: &[String]) -> Result<()> {
    let numeric: Option<Vec<f64>> = dates.iter().map(|d| d.parse::<f64>().ok()).collect();
    let ok = match numeric {
        Some(nums) => nums.windows(2).all(|w| w[0] <= w[1]),
        None => dates.windows(2).all(|w| w[0] <= w[1]),
    };
    if !ok {
        return Err(DfmError::InvalidInput(
            "panel dates must be monotone non-decreasing".into(),
        ));
    }
    Ok(())
}
