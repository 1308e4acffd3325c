use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;

use glofnd::cli::{run_eval, run_experiment, run_oracle_check, run_sweep, RunConfig, SweepAxis, KEYS};
use glofnd::{Error, Result};

const OUTPUT_ROOT_ENV: &str = "GLOFND_OUTPUT_ROOT";

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn with_config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value config file; flags override its entries"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        cmd.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .value_name("VALUE")
                .help(*help)
                .action(ArgAction::Set),
        )
    })
}

fn command() -> Command {
    Command::new("glofnd")
        .about("Learned per-anchor thresholds for false-negative filtering in contrastive training")
        .subcommand_required(true)
        .subcommand(with_config_args(
            Command::new("train").about("Run one training experiment"),
        ))
        .subcommand(with_config_args(Command::new("oracle-check").about(
            "Fit thresholds on frozen embeddings and compare with the exact optimum",
        )))
        .subcommand(with_config_args(
            Command::new("sweep")
                .about("Run one experiment per value of a config key")
                .arg(
                    Arg::new("axis")
                        .long("axis")
                        .required(true)
                        .value_parser(["alpha", "warmup_epoch", "batch_size"]),
                )
                .arg(
                    Arg::new("values")
                        .long("values")
                        .required(true)
                        .value_delimiter(',')
                        .num_args(1..),
                ),
        ))
        .subcommand(with_config_args(
            Command::new("eval").about("Score a trained checkpoint"),
        ))
}

fn load_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(std::path::Path::new(path))?,
        None => RunConfig::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
        if cfg.output_dir.is_relative() {
            cfg.output_dir = PathBuf::from(root).join(&cfg.output_dir);
        }
    }
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(matches: &ArgMatches) -> Result<()> {
    let (name, m) = matches
        .subcommand()
        .ok_or_else(|| Error::BadConfig("missing subcommand".into()))?;
    let cfg = load_config(m)?;
    match name {
        "train" => print_json(&run_experiment(&cfg)?),
        "oracle-check" => print_json(&run_oracle_check(&cfg)?),
        "eval" => print_json(&run_eval(&cfg)?),
        "sweep" => {
            let axis: SweepAxis = m
                .get_one::<String>("axis")
                .map(String::as_str)
                .unwrap_or_default()
                .parse()?;
            let values: Vec<String> = m
                .get_many::<String>("values")
                .map(|v| v.map(|s| s.trim().to_string()).collect())
                .unwrap_or_default();
            print_json(&run_sweep(&cfg, axis, &values)?)
        }
        other => Err(Error::BadConfig(format!("unknown subcommand `{other}`"))),
    }
}

fn report_error(kind: &str, message: &str) {
    let body = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report_error("ConfigError", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
