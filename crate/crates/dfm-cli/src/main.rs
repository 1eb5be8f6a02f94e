//! `dfm` - experiment harness for diffusion factor models.
//!
//! Subcommands: `simulate` a ground-truth panel, `train` a score network,
//! `sample` from a checkpoint, `recover-subspace` from a panel, run the
//! synthetic `study`, run a rolling `portfolio` backtest, and summarize
//! metrics with `report`. Exit codes: 0 success, 2 configuration error,
//! 3 data error, 4 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use dfm_core::diffusion::FactorModelSpec;
use dfm_core::error::{DfmError, Result};
use dfm_core::estimation::{eigen_gap, sample_moments, top_k_subspace};
use dfm_core::panel::{sidecar_path, PanelSidecar};
use dfm_core::sampler::{reverse_sample, simulate_panel, SamplerConfig};
use dfm_core::score_net::{forward, Checkpoint, ScoreNetParams};
use dfm_core::trainer::{train, write_training_log};

use dfm_cli::config::ExperimentConfig;
use dfm_cli::report::{ensure_out_dir, write_csv_lines, Manifest};
use dfm_cli::{backtest_run, ingest, study};

#[derive(Parser)]
#[command(name = "dfm", version, about = "Diffusion factor model harness")]
struct Cli {
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Dump the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct PanelArg {
    /// Input return-panel CSV.
    #[arg(long)]
    panel: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic return panel from the configured factor model.
    Simulate {
        /// Number of rows.
        #[arg(long, default_value_t = 1024)]
        n: usize,
    },
    /// Train a score network on a panel (CSV) and write a checkpoint.
    Train(PanelArg),
    /// Generate a panel by reverse sampling from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Estimate the latent subspace of a panel.
    RecoverSubspace {
        #[command(flatten)]
        panel: PanelArg,
        /// Number of factors to extract.
        #[arg(long)]
        k: usize,
    },
    /// Run the synthetic study grid (generative vs empirical estimation).
    Study,
    /// Run the rolling-window portfolio backtest on a panel.
    Portfolio(PanelArg),
    /// Aggregate a study metrics CSV into a summary table.
    Report {
        /// metrics.csv produced by `study`.
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Print the effective configuration (defaults merged with the file).
    PrintConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Determinism does not depend on this; it only sizes the pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Exit-code mapping: 2 config, 3 data, 4 numerical.
fn exit_code(e: &DfmError) -> u8 {
    match e {
        DfmError::InvalidInput(_)
        | DfmError::RangeError(_)
        | DfmError::Infeasible(_)
        | DfmError::UnsupportedLaw(_)
        | DfmError::Json(_) => 2,
        DfmError::Parse { .. }
        | DfmError::Io(_)
        | DfmError::Csv(_)
        | DfmError::InsufficientData(_)
        | DfmError::Alignment(_) => 3,
        DfmError::SingularMatrix(_)
        | DfmError::DegenerateInput(_)
        | DfmError::NumericalUnderflow(_)
        | DfmError::DivisionDegenerate(_)
        | DfmError::DegenerateTangency(_)
        | DfmError::NumericalAbort(_)
        | DfmError::TrainAbort { .. } => 4,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cli.print_config {
        println!("{}", cfg.to_canonical_json());
        return Ok(());
    }
    match &cli.command {
        None => Err(DfmError::InvalidInput(
            "no subcommand given (see --help)".into(),
        )),
        Some(Command::PrintConfig) => {
            println!("{}", cfg.to_canonical_json());
            Ok(())
        }
        Some(Command::Simulate { n }) => cmd_simulate(&cfg, *n),
        Some(Command::Train(panel)) => cmd_train(&cfg, &panel.panel),
        Some(Command::Sample { checkpoint }) => cmd_sample(&cfg, checkpoint),
        Some(Command::RecoverSubspace { panel, k }) => cmd_recover(&cfg, &panel.panel, *k),
        Some(Command::Study) => {
            let dir = out_dir(&cfg);
            study::run_synthetic_study(&cfg, Some(&dir))?;
            println!("study results written to {}", dir.display());
            Ok(())
        }
        Some(Command::Portfolio(panel)) => cmd_portfolio(&cfg, &panel.panel),
        Some(Command::Report { metrics }) => cmd_report(&cfg, metrics),
    }
}

fn spec_of(cfg: &ExperimentConfig) -> Result<FactorModelSpec> {
    FactorModelSpec::sample_synthetic(cfg.model.d, cfg.model.k, cfg.model.model_seed)
}

fn cmd_simulate(cfg: &ExperimentConfig, n: usize) -> Result<()> {
    let dir = ensure_out_dir(&out_dir(cfg))?;
    let spec = spec_of(cfg)?;
    let panel = simulate_panel(&spec, n, cfg.seed)?;
    let path = dir.join("panel.csv");
    panel.write_csv(&path)?;
    let sidecar = PanelSidecar::new(
        &serde_json::to_value(&spec)?,
        cfg.seed,
        serde_json::json!({ "n": n, "mode": "simulate" }),
    );
    sidecar.write(&sidecar_path(&path))?;
    println!("wrote {} ({} x {})", path.display(), n, spec.d());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, panel_path: &Path) -> Result<()> {
    let dir = ensure_out_dir(&out_dir(cfg))?;
    let (panel, rep) = ingest::ingest_csv(panel_path, &cfg.preprocess, cfg.seed)?;
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    let sched = cfg.schedule.build()?;
    let c_max = cfg.net.c_max.unwrap_or(1.0);
    let mut net = ScoreNetParams::init(
        panel.n_assets(),
        cfg.model.k.min(panel.n_assets().saturating_sub(1)).max(1),
        &cfg.net.hidden,
        c_max,
        cfg.net.time_features,
        cfg.seed,
    )?;
    net.clip_radius = cfg.net.clip_radius;
    let tc = cfg.train.build(cfg.seed);
    let (trained, trace) = train(&panel, &net, &sched, &tc)?;
    let ck = Checkpoint::new(trained, sched, vec![cfg.seed]);
    let ck_path = dir.join("checkpoint.json");
    ck.save(&ck_path)?;
    let log_path = dir.join("train_log.csv");
    write_training_log(&log_path, &trace)?;
    println!(
        "trained {} epochs; checkpoint {}, log {}",
        trace.len(),
        ck_path.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_sample(cfg: &ExperimentConfig, ck_path: &Path) -> Result<()> {
    let dir = ensure_out_dir(&out_dir(cfg))?;
    let ck = Checkpoint::load(ck_path)?;
    let sampler_cfg = SamplerConfig {
        n_steps: cfg.sampler.n_steps,
        mode: cfg.sampler.mode,
        m: cfg.sampler.m,
        seed: cfg.seed,
    };
    let sched = ck.schedule;
    let params = ck.params.clone();
    let d = ck.d;
    let score =
        move |r: &[f64], t: f64| -> Vec<f64> { forward(&params, &sched, r, t).expect("forward") };
    let panel = reverse_sample(score, d, &sched, &sampler_cfg)?;
    let path = dir.join("generated.csv");
    panel.write_csv(&path)?;
    let sidecar = PanelSidecar::new(
        &serde_json::to_value(&ck)?,
        cfg.seed,
        serde_json::to_value(sampler_cfg)?,
    );
    sidecar.write(&sidecar_path(&path))?;
    println!("wrote {} ({} x {})", path.display(), sampler_cfg.m, d);
    Ok(())
}

fn cmd_recover(cfg: &ExperimentConfig, panel_path: &Path, k: usize) -> Result<()> {
    let dir = ensure_out_dir(&out_dir(cfg))?;
    let (panel, rep) = ingest::ingest_csv(panel_path, &cfg.preprocess, cfg.seed)?;
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    let moments = sample_moments(&panel)?;
    let sub = top_k_subspace(&moments, k)?;
    let gap = if k < panel.n_assets() {
        Some(eigen_gap(&moments, k)?)
    } else {
        None
    };
    let eval_path = dir.join("eigenvalues.csv");
    let rows: Vec<String> = sub
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{},{}", i + 1, v))
        .collect();
    write_csv_lines(&eval_path, "rank,eigenvalue", &rows)?;
    let basis_path = dir.join("basis.csv");
    let header = (1..=k)
        .map(|j| format!("u{j}"))
        .collect::<Vec<_>>()
        .join(",");
    let brows: Vec<String> = (0..panel.n_assets())
        .map(|i| {
            (0..k)
                .map(|j| format!("{}", sub.basis[(i, j)]))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    write_csv_lines(&basis_path, &header, &brows)?;
    match gap {
        Some(g) => println!(
            "top-{k} eigenvalues written; eigen-gap({k}) = {g}"
        ),
        None => println!("top-{k} eigenvalues written"),
    }
    Ok(())
}

fn cmd_portfolio(cfg: &ExperimentConfig, panel_path: &Path) -> Result<()> {
    let dir = ensure_out_dir(&out_dir(cfg))?;
    // Ingest handles missing values only; winsorization and standardization
    // are fit-time devices applied inside the backtest windows, never to the
    // test returns.
    let mut ingest_pre = cfg.preprocess.clone();
    ingest_pre.standardize = false;
    ingest_pre.winsorize = false;
    let (panel, rep) = ingest::ingest_csv(panel_path, &ingest_pre, cfg.seed)?;
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    let run = backtest_run::run_backtest(cfg, &panel, Some(&dir))?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "backtested {} methods over {} test rows; report in {}",
        run.reports.len(),
        run.dates.len(),
        dir.display()
    );
    Ok(())
}

/// One parsed row of the long-format metrics CSV.
struct MetricRow {
    n: usize,
    metric: String,
    diff_value: f64,
    emp_value: f64,
    ratio: f64,
}

fn cmd_report(cfg: &ExperimentConfig, metrics_path: &Path) -> Result<()> {
    let started = Instant::now();
    let dir = ensure_out_dir(&out_dir(cfg))?;
    // Parse the long-format metrics CSV back into rows.
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(metrics_path)?;
    let mut rows: Vec<MetricRow> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = idx + 2;
        let parse_err = |msg: &str| DfmError::Parse {
            line,
            msg: msg.to_string(),
        };
        // The trailing seed column is ignored by the aggregation.
        rec.get(5).ok_or_else(|| parse_err("bad seed"))?;
        rows.push(MetricRow {
            n: rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err("bad N"))?,
            metric: rec.get(1).ok_or_else(|| parse_err("bad metric"))?.to_string(),
            diff_value: rec
                .get(2)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err("bad diff_value"))?,
            emp_value: rec
                .get(3)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err("bad emp_value"))?,
            ratio: rec
                .get(4)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err("bad ratio"))?,
        });
    }
    if rows.is_empty() {
        return Err(DfmError::InsufficientData("metrics CSV is empty".into()));
    }
    // Group by (N, metric) preserving first-seen order.
    let mut keys: Vec<(usize, String)> = Vec::new();
    for row in &rows {
        let key = (row.n, row.metric.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out_rows = Vec::new();
    for (n, metric) in keys {
        let vals: Vec<&MetricRow> = rows
            .iter()
            .filter(|r| r.n == n && r.metric == metric)
            .collect();
        let stat = |f: &dyn Fn(&MetricRow) -> f64| {
            let v: Vec<f64> = vals.iter().map(|r| f(r)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = if v.len() > 1 {
                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            (m, s)
        };
        let (dm, ds) = stat(&|r| r.diff_value);
        let (em, es) = stat(&|r| r.emp_value);
        let (rm, rs) = stat(&|r| r.ratio);
        out_rows.push(format!(
            "{n},{metric},{dm},{ds},{em},{es},{rm},{rs}"
        ));
    }
    let summary_path = dir.join("report_summary.csv");
    write_csv_lines(
        &summary_path,
        "N,metric,diff_mean,diff_std,emp_mean,emp_std,ratio_mean,ratio_std",
        &out_rows,
    )?;
    let mut manifest = Manifest::new(
        &cfg.hash_json(),
        vec![cfg.seed],
        started.elapsed().as_millis(),
    );
    manifest.record(&summary_path)?;
    manifest.write(&dir.join("report_manifest.json"))?;
    println!("summary written to {}", summary_path.display());
    Ok(())
}
