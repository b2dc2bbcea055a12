//! `latentloop` command-line entry point.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, Command};

use commands::{Failure, COMMANDS};
use config::{find_key, RunConfig};

const COMMON: &[&str] = &["seed", "workers", "out"];

fn cli() -> Command {
    let mut root = Command::new("latentloop")
        .about("Latent-token reasoning toolkit: PCA subspaces, training, interventions and sweeps")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about, keys) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key = value configuration file")
                .value_parser(clap::value_parser!(PathBuf)),
        );
        for &k in COMMON.iter().chain(keys) {
            let key = find_key(k).expect("registered key");
            sub = sub.arg(
                Arg::new(key.name)
                    .long(key.name.replace('_', "-"))
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(format!("{} [default: {}]", key.help, key.default)),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let overrides: Vec<(&'static str, String)> = sub
        .ids()
        .filter_map(|id| find_key(id.as_str()))
        .filter_map(|k| sub.get_one::<String>(k.name).map(|v| (k.name, v.clone())))
        .collect();
    let file = sub.get_one::<PathBuf>("config").map(PathBuf::as_path);
    let result = RunConfig::resolve(name, file, &overrides)
        .map_err(Failure::Config)
        .and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
