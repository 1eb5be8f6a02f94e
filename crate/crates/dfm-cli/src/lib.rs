//! Library surface of the `dfm` harness: configuration, CSV ingestion with
//! preprocessing, the synthetic study driver, the rolling portfolio
//! backtest, and report emission. The `dfm` binary is a thin wrapper over
//! these modules.

pub mod backtest_run;
pub mod config;
pub mod ingest;
pub mod report;
pub mod study;
