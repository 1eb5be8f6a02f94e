//! Synthetic study driver: for each sample size and repetition, simulate a
//! training panel from a fixed ground-truth factor model, estimate moments
//! and the latent subspace both directly (empirical arm) and from
//! model-generated data (generative arm), and report the four relative-error
//! metrics with their ratios.
//!
//! The generative arm either plugs in the exact Gaussian score (isolating
//! sampler plus estimation error) or trains the structured score network on
//! the panel first. Cells run in parallel and are merged in canonical
//! `(N, repetition)` order, so outputs are byte-stable across thread counts.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use dfm_core::diffusion::{
    gaussian_score_oracle, marginal_covariance, DiffusionSchedule, FactorModelSpec,
};
use dfm_core::error::{DfmError, Result};
use dfm_core::estimation::{
    re_cov, re_eigen, re_mean, re_subspace, sample_moments_tagged, top_k_subspace,
    MomentEstimate, MomentSource,
};
use dfm_core::linalg::{inv_spd, Mat};
use dfm_core::panel::ReturnPanel;
use dfm_core::rng::fnv1a_64;
use dfm_core::sampler::{reverse_sample, simulate_panel, SamplerConfig};
use dfm_core::score_net::{forward, ScoreNetParams};
use dfm_core::trainer::train;

use crate::config::{ExperimentConfig, StudyArm};
use crate::report::{ensure_out_dir, write_csv_lines, Manifest};

pub const METRIC_NAMES: [&str; 4] = ["re1_eigen", "re2_subspace", "re3_mean", "re4_cov"];

/// One `(N, metric, repetition)` measurement.
#[derive(Clone, Debug)]
pub struct StudyRow {
    pub n: usize,
    pub metric: &'static str,
    pub diff_value: f64,
    pub emp_value: f64,
    pub ratio: f64,
    pub rep: usize,
}

/// Aggregated rows plus per-(N, metric) summary statistics.
#[derive(Clone, Debug)]
pub struct StudyOutput {
    pub rows: Vec<StudyRow>,
}

impl StudyOutput {
    /// Mean and standard deviation of a column grouped by `(N, metric)`.
    pub fn summarize(&self) -> Vec<SummaryRow> {
        let mut groups: Vec<((usize, &'static str), Vec<&StudyRow>)> = Vec::new();
        for row in &self.rows {
            let key = (row.n, row.metric);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(row),
                None => groups.push((key, vec![row])),
            }
        }
        groups
            .into_iter()
            .map(|((n, metric), rows)| {
                let stats = |f: &dyn Fn(&StudyRow) -> f64| {
                    let vals: Vec<f64> = rows.iter().map(|r| f(r)).collect();
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = if vals.len() > 1 {
                        vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                            / (vals.len() - 1) as f64
                    } else {
                        0.0
                    };
                    (m, var.sqrt())
                };
                let (diff_mean, diff_std) = stats(&|r| r.diff_value);
                let (emp_mean, emp_std) = stats(&|r| r.emp_value);
                let (ratio_mean, ratio_std) = stats(&|r| r.ratio);
                SummaryRow {
                    n,
                    metric,
                    diff_mean,
                    diff_std,
                    emp_mean,
                    emp_std,
                    ratio_mean,
                    ratio_std,
                }
            })
            .collect()
    }

    /// Mean ratio for a given metric at a given sample size.
    pub fn mean_ratio(&self, n: usize, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.n == n && r.metric == metric)
            .map(|r| r.ratio)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub n: usize,
    pub metric: &'static str,
    pub diff_mean: f64,
    pub diff_std: f64,
    pub emp_mean: f64,
    pub emp_std: f64,
    pub ratio_mean: f64,
    pub ratio_std: f64,
}

/// Ground-truth quantities the metrics compare against.
struct GroundTruth {
    mu0: Vec<f64>,
    sigma0: Mat,
    top_vals: Vec<f64>,
    top_basis: Mat,
}

impl GroundTruth {
    fn of(spec: &FactorModelSpec, k: usize) -> Result<Self> {
        let sigma0 = spec.covariance_sigma0();
        let oracle = MomentEstimate::new(
            spec.mean_mu0(),
            sigma0.clone(),
            MomentSource::Oracle,
            0,
        )?;
        let sub = top_k_subspace(&oracle, k)?;
        Ok(GroundTruth {
            mu0: spec.mean_mu0(),
            sigma0,
            top_vals: sub.eigenvalues,
            top_basis: sub.basis,
        })
    }
}

fn metrics_against_truth(
    m: &MomentEstimate,
    truth: &GroundTruth,
    k: usize,
) -> Result<[f64; 4]> {
    let sub = top_k_subspace(m, k)?;
    Ok([
        re_eigen(&sub.eigenvalues, &truth.top_vals)?,
        re_subspace(&sub.basis, &truth.top_basis)?,
        re_mean(&m.mean, &truth.mu0)?,
        re_cov(&m.cov, &truth.sigma0)?,
    ])
}

/// Derive a per-cell seed from the study seed and the cell coordinates.
fn cell_seed(seed: u64, n: usize, rep: usize, tag: u64) -> u64 {
    let mut bytes = Vec::with_capacity(32);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&(n as u64).to_le_bytes());
    bytes.extend_from_slice(&(rep as u64).to_le_bytes());
    bytes.extend_from_slice(&tag.to_le_bytes());
    fnv1a_64(&bytes)
}

/// Precomputed per-grid-time Gaussian score table. Falls back to a direct
/// solve for off-grid times.
fn oracle_score_fn(
    spec: &FactorModelSpec,
    sched: &DiffusionSchedule,
    times: &[f64],
) -> Result<impl Fn(&[f64], f64) -> Vec<f64> + Sync + use<>> {
    let mut table: HashMap<u64, (Mat, Vec<f64>)> = HashMap::new();
    let mu0 = spec.mean_mu0();
    for &t in times {
        let inv = inv_spd(&marginal_covariance(spec, sched, t)?)?;
        let alpha = sched.alpha(t)?;
        let shift: Vec<f64> = mu0.iter().map(|m| alpha * m).collect();
        table.insert(t.to_bits(), (inv, shift));
    }
    let spec = spec.clone();
    let sched = *sched;
    Ok(move |r: &[f64], t: f64| -> Vec<f64> {
        if let Some((inv, shift)) = table.get(&t.to_bits()) {
            let resid: Vec<f64> = r.iter().zip(shift).map(|(a, b)| a - b).collect();
            inv.matvec(&resid).into_iter().map(|x| -x).collect()
        } else {
            gaussian_score_oracle(&spec, &sched, t, r).expect("oracle score")
        }
    })
}

fn run_cell(
    cfg: &ExperimentConfig,
    spec: &FactorModelSpec,
    truth: &GroundTruth,
    sched: &DiffusionSchedule,
    n: usize,
    rep: usize,
) -> Result<Vec<StudyRow>> {
    let k = cfg.model.k;
    let panel = simulate_panel(spec, n, cell_seed(cfg.seed, n, rep, 1))?;
    let emp = sample_moments_tagged(&panel, MomentSource::RealEmp)?;
    let emp_metrics = metrics_against_truth(&emp, truth, k)?;

    let sampler_cfg = SamplerConfig {
        n_steps: cfg.sampler.n_steps,
        mode: cfg.sampler.mode,
        m: cfg.sampler.m,
        seed: cell_seed(cfg.seed, n, rep, 2),
    };
    let generated = match cfg.study.arm {
        StudyArm::Oracle => {
            let times = sampler_cfg.grid_times(sched);
            let score = oracle_score_fn(spec, sched, &times)?;
            reverse_sample(score, spec.d(), sched, &sampler_cfg)?
        }
        StudyArm::Trained => {
            let net = trained_net(cfg, spec, &panel, sched, n, rep)?;
            let sched_c = *sched;
            let score = move |r: &[f64], t: f64| -> Vec<f64> {
                forward(&net, &sched_c, r, t).expect("net forward")
            };
            reverse_sample(score, spec.d(), sched, &sampler_cfg)?
        }
    };
    let diff = sample_moments_tagged(&generated, MomentSource::DiffEmp)?;
    let diff_metrics = metrics_against_truth(&diff, truth, k)?;

    Ok(METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| StudyRow {
            n,
            metric: name,
            diff_value: diff_metrics[i],
            emp_value: emp_metrics[i],
            ratio: if emp_metrics[i] != 0.0 {
                diff_metrics[i] / emp_metrics[i]
            } else {
                f64::NAN
            },
            rep,
        })
        .collect())
}

fn trained_net(
    cfg: &ExperimentConfig,
    spec: &FactorModelSpec,
    panel: &ReturnPanel,
    sched: &DiffusionSchedule,
    n: usize,
    rep: usize,
) -> Result<ScoreNetParams> {
    let c_max = cfg
        .net
        .c_max
        .unwrap_or_else(|| (spec.sigma_max() * spec.sigma_max()).max(1e-6));
    let mut net = ScoreNetParams::init(
        spec.d(),
        cfg.model.k,
        &cfg.net.hidden,
        c_max,
        cfg.net.time_features,
        cell_seed(cfg.seed, n, rep, 3),
    )?;
    net.clip_radius = cfg.net.clip_radius;
    let mut tc = cfg.train.build(cell_seed(cfg.seed, n, rep, 4));
    tc.batch_size = tc.batch_size.min(panel.n_rows());
    let (trained, _) = train(panel, &net, sched, &tc)?;
    Ok(trained)
}

/// Run the full grid. Returns all rows; writes `metrics.csv`, `summary.csv`,
/// and `manifest.json` into `out_dir` when given.
pub fn run_synthetic_study(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<StudyOutput> {
    let started = Instant::now();
    let sched = cfg.schedule.build()?;
    let spec = FactorModelSpec::sample_synthetic(cfg.model.d, cfg.model.k, cfg.model.model_seed)?;
    if !matches!(
        spec.factor_law(),
        dfm_core::diffusion::FactorLaw::Gaussian { .. }
    ) && cfg.study.arm == StudyArm::Oracle
    {
        return Err(DfmError::UnsupportedLaw(
            "oracle study arm needs a Gaussian ground truth".into(),
        ));
    }
    let truth = GroundTruth::of(&spec, cfg.model.k)?;

    let mut cells: Vec<(usize, usize)> = Vec::new();
    for &n in &cfg.study.sample_sizes {
        for rep in 0..cfg.study.repetitions {
            cells.push((n, rep));
        }
    }
    let results: Vec<Result<Vec<StudyRow>>> = cells
        .par_iter()
        .map(|&(n, rep)| {
            run_cell(cfg, &spec, &truth, &sched, n, rep).map_err(|e| {
                // Keep the failure class (and with it the exit code); only
                // prepend the cell coordinates.
                let msg = format!("study cell (N={n}, rep={rep}): {e}");
                match e {
                    DfmError::NumericalAbort(_) => DfmError::NumericalAbort(msg),
                    DfmError::TrainAbort { .. } => DfmError::NumericalAbort(msg),
                    DfmError::SingularMatrix(_) => DfmError::SingularMatrix(msg),
                    DfmError::InsufficientData(_) => DfmError::InsufficientData(msg),
                    _ => DfmError::InvalidInput(msg),
                }
            })
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    // Canonical order: by N, then repetition, then metric index.
    rows.sort_by_key(|r| {
        (
            r.n,
            r.rep,
            METRIC_NAMES.iter().position(|m| *m == r.metric).unwrap(),
        )
    });
    let out = StudyOutput { rows };

    if let Some(dir) = out_dir {
        ensure_out_dir(dir)?;
        let metrics_path = dir.join("metrics.csv");
        let metric_rows: Vec<String> = out
            .rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{}",
                    r.n, r.metric, r.diff_value, r.emp_value, r.ratio, r.rep
                )
            })
            .collect();
        write_csv_lines(
            &metrics_path,
            "N,metric,diff_value,emp_value,ratio,seed",
            &metric_rows,
        )?;

        let summary_path = dir.join("summary.csv");
        let summary_rows: Vec<String> = out
            .summarize()
            .iter()
            .map(|s| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    s.n,
                    s.metric,
                    s.diff_mean,
                    s.diff_std,
                    s.emp_mean,
                    s.emp_std,
                    s.ratio_mean,
                    s.ratio_std
                )
            })
            .collect();
        write_csv_lines(
            &summary_path,
            "N,metric,diff_mean,diff_std,emp_mean,emp_std,ratio_mean,ratio_std",
            &summary_rows,
        )?;

        let mut manifest = Manifest::new(
            &cfg.hash_json(),
            vec![cfg.seed],
            started.elapsed().as_millis(),
        );
        manifest.record(&metrics_path)?;
        manifest.record(&summary_path)?;
        manifest.write(&dir.join("manifest.json"))?;
    }
    Ok(out)
}
