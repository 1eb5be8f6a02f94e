//! Rolling-window portfolio backtest: at each rebalance date, fit the
//! configured moment estimators on the trailing window (training a diffusion
//! model and generating synthetic rows for the Diff arms), solve the
//! mean-variance weights, hold the target until the next update with daily
//! rebalancing, and score the resulting daily returns.
//!
//! When standardization is enabled the generative pipeline trains on
//! standardized window returns and the generated moments are mapped back to
//! return units (`mean = m + s .* mean_z`, `cov = diag(s) cov_z diag(s)`), so
//! every method's inputs are expressed in the same units. Real-arm moments
//! come from the (optionally winsorized) raw-scale window.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use dfm_core::error::{DfmError, Result};
use dfm_core::estimation::{sample_moments_tagged, MomentEstimate, MomentSource};
use dfm_core::linalg::Mat;
use dfm_core::panel::ReturnPanel;
use dfm_core::portfolio::{
    backtest, mean_variance_weights, shrink_bayes_stein, shrink_ledoit_wolf, shrink_olse,
    BacktestConfig, BacktestResult, Weights,
};
use dfm_core::rng::fnv1a_64;
use dfm_core::sampler::{reverse_sample, SamplerConfig};
use dfm_core::score_net::{forward, ScoreNetParams};
use dfm_core::trainer::train;

use crate::config::{ExperimentConfig, MethodId};
use crate::ingest::preprocess_values;
use crate::report::{ensure_out_dir, write_csv_lines, Manifest};

/// Final per-method report row.
#[derive(Clone, Debug)]
pub struct MethodReport {
    pub method: MethodId,
    pub result: BacktestResult,
}

pub struct BacktestRun {
    pub reports: Vec<MethodReport>,
    /// Per-method daily target weights aligned with the test rows.
    pub schedules: Vec<(MethodId, Vec<Weights>)>,
    /// Test-row dates.
    pub dates: Vec<String>,
    pub warnings: Vec<String>,
}

/// Moment estimates of one window, for both data arms.
struct WindowMoments {
    real: MomentEstimate,
    diff: Option<MomentEstimate>,
}

fn window_seed(seed: u64, start: usize, tag: u64) -> u64 {
    let mut bytes = Vec::with_capacity(24);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&(start as u64).to_le_bytes());
    bytes.extend_from_slice(&tag.to_le_bytes());
    fnv1a_64(&bytes)
}

/// Train a score network on the (preprocessed) window and generate rows;
/// returns generated moments mapped back to return units.
fn diff_moments(
    cfg: &ExperimentConfig,
    window: &ReturnPanel,
    start: usize,
    winsorize_here: bool,
) -> Result<MomentEstimate> {
    let sched = cfg.schedule.build()?;
    let mut pre = cfg.preprocess.clone();
    pre.winsorize = cfg.preprocess.winsorize && winsorize_here;
    let (train_panel, scaling) =
        preprocess_values(window, &pre, window_seed(cfg.seed, start, 11))?;
    let d = train_panel.n_assets();
    // Data-driven variance cap when the config leaves c_max unset.
    let c_max = cfg.net.c_max.unwrap_or_else(|| {
        let m = sample_moments_tagged(&train_panel, MomentSource::RealEmp)
            .map(|m| {
                (0..d)
                    .map(|i| m.cov[(i, i)])
                    .fold(0.0f64, f64::max)
            })
            .unwrap_or(1.0);
        m.max(1e-6)
    });
    let mut net = ScoreNetParams::init(
        d,
        cfg.model.k.min(d.saturating_sub(1)).max(1),
        &cfg.net.hidden,
        c_max,
        cfg.net.time_features,
        window_seed(cfg.seed, start, 12),
    )?;
    net.clip_radius = cfg.net.clip_radius;
    let mut tc = cfg.train.build(window_seed(cfg.seed, start, 13));
    tc.batch_size = tc.batch_size.min(train_panel.n_rows());
    let (trained, _) = train(&train_panel, &net, &sched, &tc)?;

    let sampler_cfg = SamplerConfig {
        n_steps: cfg.sampler.n_steps,
        mode: cfg.sampler.mode,
        m: cfg.portfolio.generated_samples,
        seed: window_seed(cfg.seed, start, 14),
    };
    let score = move |r: &[f64], t: f64| -> Vec<f64> {
        forward(&trained, &sched, r, t).expect("net forward")
    };
    let generated = reverse_sample(score, d, &sched, &sampler_cfg)?;
    let mut m = sample_moments_tagged(&generated, MomentSource::DiffEmp)?;
    if let Some(sc) = scaling {
        // Undo standardization: r = m + s z.
        let mut mean = Vec::with_capacity(d);
        for i in 0..d {
            mean.push(sc.means[i] + sc.stds[i] * m.mean[i]);
        }
        let mut cov = Mat::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] = sc.stds[i] * m.cov[(i, j)] * sc.stds[j];
            }
        }
        m = MomentEstimate::new(mean, cov, MomentSource::DiffEmp, m.n_used)?;
    }
    Ok(m)
}

fn window_moments(
    cfg: &ExperimentConfig,
    fit_source: &ReturnPanel,
    start: usize,
    end: usize,
    need_diff: bool,
    winsorize_here: bool,
) -> Result<WindowMoments> {
    let window = fit_source.slice_rows(start, end)?;
    // Real-arm inputs: winsorized (if enabled) raw-scale window.
    let mut pre = cfg.preprocess.clone();
    pre.standardize = false;
    pre.winsorize = cfg.preprocess.winsorize && winsorize_here;
    let (real_window, _) = preprocess_values(&window, &pre, window_seed(cfg.seed, start, 10))?;
    let real = sample_moments_tagged(&real_window, MomentSource::RealEmp)?;
    let diff = if need_diff {
        Some(diff_moments(cfg, &window, start, winsorize_here)?)
    } else {
        None
    };
    Ok(WindowMoments { real, diff })
}

/// Shrinkage selector per arm.
#[derive(Clone, Copy, PartialEq, Eq)]
enum MeanEst {
    Emp,
    BayesStein,
    Olse,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CovEst {
    Emp,
    LedoitWolf,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Arm {
    Real,
    Diff,
}

fn mv_parts(method: MethodId) -> Option<(Arm, MeanEst, Arm, CovEst)> {
    use Arm::{Diff, Real};
    use CovEst::{Emp as CovEmp, LedoitWolf};
    use MeanEst::{BayesStein, Emp, Olse};
    Some(match method {
        MethodId::Ew | MethodId::Vw => return None,
        MethodId::RealEmpRealEmp => (Real, Emp, Real, CovEmp),
        MethodId::RealBsRealEmp => (Real, BayesStein, Real, CovEmp),
        MethodId::RealOlseRealEmp => (Real, Olse, Real, CovEmp),
        MethodId::RealEmpRealLw => (Real, Emp, Real, LedoitWolf),
        MethodId::RealBsRealLw => (Real, BayesStein, Real, LedoitWolf),
        MethodId::RealOlseRealLw => (Real, Olse, Real, LedoitWolf),
        MethodId::DiffEmpDiffEmp => (Diff, Emp, Diff, CovEmp),
        MethodId::DiffBsDiffEmp => (Diff, BayesStein, Diff, CovEmp),
        MethodId::DiffOlseDiffEmp => (Diff, Olse, Diff, CovEmp),
        MethodId::DiffEmpDiffLw => (Diff, Emp, Diff, LedoitWolf),
        MethodId::DiffBsDiffLw => (Diff, BayesStein, Diff, LedoitWolf),
        MethodId::DiffOlseDiffLw => (Diff, Olse, Diff, LedoitWolf),
        MethodId::RealEmpDiffEmp => (Real, Emp, Diff, CovEmp),
        MethodId::DiffEmpRealEmp => (Diff, Emp, Real, CovEmp),
    })
}

fn pick(w: &WindowMoments, arm: Arm) -> Result<&MomentEstimate> {
    match arm {
        Arm::Real => Ok(&w.real),
        Arm::Diff => w.diff.as_ref().ok_or_else(|| {
            DfmError::InvalidInput("generated moments missing for a Diff method".into())
        }),
    }
}

/// Target weights of one method on one window.
fn method_weights(
    cfg: &ExperimentConfig,
    method: MethodId,
    moments: &WindowMoments,
    caps: Option<&[f64]>,
    warnings: &mut Vec<String>,
) -> Result<Weights> {
    let d = moments.real.dim();
    match method {
        MethodId::Ew => Ok(Weights::equal(d)),
        MethodId::Vw => match caps {
            Some(c) if c.iter().all(|&x| x >= 0.0) && c.iter().sum::<f64>() > 0.0 => {
                let total: f64 = c.iter().sum();
                Ok(Weights(c.iter().map(|x| x / total).collect()))
            }
            _ => {
                warnings.push(
                    "VW requested without usable market caps; degrading to EW".to_string(),
                );
                Ok(Weights::equal(d))
            }
        },
        _ => {
            let (mean_arm, mean_est, cov_arm, cov_est) =
                mv_parts(method).expect("mv method");
            let mean_base = pick(moments, mean_arm)?;
            let cov_base = pick(moments, cov_arm)?;
            let mean = match mean_est {
                MeanEst::Emp => mean_base.mean.clone(),
                MeanEst::BayesStein => {
                    shrink_bayes_stein(mean_base, mean_base.n_used, None)?.mean
                }
                MeanEst::Olse => shrink_olse(mean_base, mean_base.n_used, None)?.mean,
            };
            let cov = match cov_est {
                CovEst::Emp => cov_base.cov.clone(),
                CovEst::LedoitWolf => {
                    shrink_ledoit_wolf(cov_base, cov_base.n_used, None)?.cov
                }
            };
            let combined = MomentEstimate::new(mean, cov, cov_base.source, cov_base.n_used)?;
            mean_variance_weights(&combined, cfg.portfolio.eta, cfg.portfolio.constraint)
        }
    }
}

/// Run the rolling backtest over an ingested panel. Writes `report.csv`,
/// one `weights_<method>.csv` per method, and `manifest.json` when an output
/// directory is given.
pub fn run_backtest(
    cfg: &ExperimentConfig,
    panel: &ReturnPanel,
    out_dir: Option<&Path>,
) -> Result<BacktestRun> {
    let started = Instant::now();
    let n = panel.n_rows();
    let window = cfg.portfolio.window;
    if n < window + 1 {
        return Err(DfmError::InvalidInput(format!(
            "panel has {n} rows; need at least window + 1 = {}",
            window + 1
        )));
    }
    let methods = {
        let mut m = cfg.portfolio.methods.clone();
        m.sort();
        m.dedup();
        m
    };
    let need_diff = methods.iter().any(|m| m.uses_generated_data());

    // Winsorization applies to fitting data only; test returns stay raw.
    // With `reselect_per_window` the pass runs inside each window, otherwise
    // once over the whole panel up front.
    let winsorize_per_window = cfg.portfolio.reselect_per_window;
    let fit_source: ReturnPanel =
        if cfg.preprocess.winsorize && !winsorize_per_window {
            let mut pre = cfg.preprocess.clone();
            pre.standardize = false;
            preprocess_values(panel, &pre, window_seed(cfg.seed, 0, 9))?.0
        } else {
            panel.clone()
        };

    // Rebalance points: fit on [t - window, t), hold over [t, next).
    let mut rebalances: Vec<(usize, usize)> = Vec::new();
    let mut t = window;
    while t < n {
        let end = (t + cfg.portfolio.update_every).min(n);
        rebalances.push((t, end));
        t = end;
    }

    // Fit windows in parallel; results merged in order.
    let fitted: Vec<Result<WindowMoments>> = rebalances
        .par_iter()
        .map(|&(t, _)| {
            window_moments(
                cfg,
                &fit_source,
                t - window,
                t,
                need_diff,
                winsorize_per_window,
            )
        })
        .collect();
    let mut window_fits = Vec::with_capacity(fitted.len());
    for f in fitted {
        window_fits.push(f?);
    }

    let mut warnings = Vec::new();
    let test_rows = n - window;
    let mut schedules: Vec<(MethodId, Vec<Weights>)> = Vec::new();
    for &method in &methods {
        let mut schedule = Vec::with_capacity(test_rows);
        for (fit, &(t, end)) in window_fits.iter().zip(&rebalances) {
            let w = method_weights(cfg, method, fit, panel.market_caps(), &mut warnings)?;
            for _ in t..end {
                schedule.push(w.clone());
            }
        }
        schedules.push((method, schedule));
    }
    warnings.dedup();

    let test_panel = panel.slice_rows(window, n)?;
    let bt_cfg = BacktestConfig {
        cost_bp: cfg.portfolio.cost_bp,
        eta: cfg.portfolio.eta,
        annualize: cfg.portfolio.annualize,
        initial_weights: None,
    };
    let mut reports = Vec::new();
    for (method, schedule) in &schedules {
        let result = backtest(schedule, &test_panel, &bt_cfg)?;
        reports.push(MethodReport {
            method: *method,
            result,
        });
    }

    let run = BacktestRun {
        reports,
        schedules,
        dates: test_panel.dates().to_vec(),
        warnings,
    };

    if let Some(dir) = out_dir {
        ensure_out_dir(dir)?;
        let report_path = dir.join("report.csv");
        let rows: Vec<String> = run
            .reports
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.method.label(),
                    r.result.mean,
                    r.result.std,
                    r.result.sharpe,
                    r.result.cer,
                    r.result.max_drawdown,
                    r.result.turnover
                )
            })
            .collect();
        write_csv_lines(&report_path, "Method,Mean,Std,SR,CER,MDD,TO", &rows)?;
        let mut manifest = Manifest::new(
            &cfg.hash_json(),
            vec![cfg.seed],
            started.elapsed().as_millis(),
        );
        manifest.record(&report_path)?;
        for (method, schedule) in &run.schedules {
            let wpath = dir.join(format!("weights_{}.csv", method.slug()));
            let mut header = String::from("date");
            for a in test_panel.assets() {
                header.push(',');
                header.push_str(a);
            }
            let wrows: Vec<String> = run
                .dates
                .iter()
                .zip(schedule)
                .map(|(date, w)| {
                    let mut line = date.clone();
                    for v in &w.0 {
                        line.push(',');
                        line.push_str(&format!("{v}"));
                    }
                    line
                })
                .collect();
            write_csv_lines(&wpath, &header, &wrows)?;
            manifest.record(&wpath)?;
        }
        manifest.write(&dir.join("manifest.json"))?;
    }
    Ok(run)
}
