//! `ptd`: data generation, training, reconstruction, evaluation and the
//! property checks for sparse-view CT reconstruction.

mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use commands::Outcome;
use config::{KeyDoc, RunConfig, EVAL_KEYS, GEN_DATA_KEYS, RECONSTRUCT_KEYS, TRAIN_KEYS, VERIFY_KEYS};
use ptd_core::PtdError;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

struct Sub {
    name: &'static str,
    about: &'static str,
    keys: &'static [KeyDoc],
    run: fn(&RunConfig) -> ptd_core::Result<Outcome>,
}

const SUBCOMMANDS: &[Sub] = &[
    Sub { name: "gen-data", about: "Simulate phantoms and noisy sparse-view sinograms", keys: GEN_DATA_KEYS, run: commands::gen_data },
    Sub { name: "train", about: "Train the reconstruction networks on a dataset", keys: TRAIN_KEYS, run: commands::train_cmd },
    Sub { name: "reconstruct", about: "Reconstruct sinograms with a trained checkpoint", keys: RECONSTRUCT_KEYS, run: commands::reconstruct_cmd },
    Sub { name: "eval", about: "PSNR/SSIM of reconstructions against ground truth", keys: EVAL_KEYS, run: commands::eval_cmd },
    Sub { name: "verify", about: "Run the numerical property checks", keys: VERIFY_KEYS, run: commands::verify_cmd },
];

fn flag_name(key: &str) -> String {
    key.replace(['_', '.'], "-")
}

fn is_switch(doc: &KeyDoc) -> bool {
    doc.default == "false"
}

fn build_cli() -> Command {
    let mut cli = Command::new("ptd")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Sparse-view CT reconstruction with a coarse predictor, texture guidance and a diffusion bridge")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sub in SUBCOMMANDS {
        let mut cmd = Command::new(sub.name)
            .about(sub.about)
            .after_help(format!("Config keys (usable in --config files and --set):\n{}", RunConfig::describe(sub.keys)))
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("key=value config file"),
            )
            .arg(
                Arg::new("set")
                    .long("set")
                    .value_name("KEY=VALUE")
                    .action(ArgAction::Append)
                    .help("override one config key"),
            );
        for doc in sub.keys {
            let arg = Arg::new(doc.key).long(flag_name(doc.key)).help(doc.help);
            cmd = cmd.arg(if is_switch(doc) { arg.action(ArgAction::SetTrue) } else { arg.value_name("VALUE") });
        }
        cli = cli.subcommand(cmd);
    }
    cli
}

fn overrides(sub: &Sub, m: &ArgMatches) -> Result<Vec<(String, String)>, PtdError> {
    let mut out = Vec::new();
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PtdError::Config(format!("--set expects KEY=VALUE, got {:?}", kv)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    for doc in sub.keys {
        if is_switch(doc) {
            if m.get_flag(doc.key) {
                out.push((doc.key.to_string(), "true".to_string()));
            }
        } else if let Some(v) = m.get_one::<String>(doc.key) {
            out.push((doc.key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn exit_code(err: &PtdError) -> u8 {
    match err {
        PtdError::Config(_) | PtdError::InvalidArgument(_) => EXIT_USAGE,
        PtdError::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let matches = match build_cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let (name, sub_m) = matches.subcommand().expect("subcommand is required");
    let sub = SUBCOMMANDS.iter().find(|s| s.name == name).expect("registered subcommand");
    let result = overrides(sub, sub_m)
        .and_then(|o| RunConfig::resolve(sub.keys, sub_m.get_one::<PathBuf>("config").map(PathBuf::as_path), &o))
        .and_then(|cfg| (sub.run)(&cfg));
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(EXIT_NUMERIC),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        build_cli().debug_assert();
    }

    #[test]
    fn flags_become_overrides() {
        let m = build_cli().try_get_matches_from(["ptd", "gen-data", "--n", "3", "--force", "--set", "seed=4"]).unwrap();
        let (_, sm) = m.subcommand().unwrap();
        let o = overrides(&SUBCOMMANDS[0], sm).unwrap();
        assert!(o.contains(&("n".into(), "3".into())));
        assert!(o.contains(&("force".into(), "true".into())));
        assert!(o.contains(&("seed".into(), "4".into())));
    }

    #[test]
    fn arch_keys_get_dashed_flags() {
        let m = build_cli().try_get_matches_from(["ptd", "train", "--arch-unet-dims", "8,16,32,64"]).unwrap();
        let (_, sm) = m.subcommand().unwrap();
        let o = overrides(&SUBCOMMANDS[1], sm).unwrap();
        assert_eq!(o, vec![("arch.unet_dims".to_string(), "8,16,32,64".to_string())]);
    }

    #[test]
    fn error_classes() {
        assert_eq!(exit_code(&PtdError::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&PtdError::Numeric("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&PtdError::Format("x".into())), EXIT_DATA);
    }
}
