use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match dictnet::cli::main_with_args(std::env::args_os(), &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(dictnet::cli::CliError::Info(msg)) => {
            print!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
