//! Application layer: CSV ingestion, rolling validation, the portfolio
//! backtest and the command-line interface.

pub mod cli;
pub mod io;
pub mod portfolio;
pub mod rolling;
