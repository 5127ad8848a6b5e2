use std::process::ExitCode;

use voxflow_cli::{env_seed, execute, parse_invocation, CliError, EXIT_OK};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cmd = match parse_invocation(std::env::args_os(), env_seed()) {
        Ok(c) => c,
        Err(CliError::Help(text)) => {
            print!("{text}");
            return ExitCode::from(EXIT_OK);
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(e.exit_code());
        }
    };
    match execute(&cmd) {
        Ok(outcome) => {
            for line in outcome.lines {
                println!("{line}");
            }
            ExitCode::from(EXIT_OK)
        }
        Err(e) => {
            log::debug!("{} failed: {e:?}", cmd.verb.name());
            eprintln!("voxflow {}: {e}", cmd.verb.name());
            ExitCode::from(e.exit_code())
        }
    }
}

