//! Configuration, experiment runners and plot output for the `glofnd` binary.

pub mod config;
pub mod plot;
pub mod run;

pub use config::{AlphaSetting, Modality, RunConfig, KEYS};
pub use run::{
    build_dataset, run_eval, run_experiment, run_oracle_check, run_sweep, OracleReport, RunReport, SweepAxis, SweepRow,
};
