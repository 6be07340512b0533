use std::process::ExitCode;

fn main() -> ExitCode {
    paumer::cli::run(std::env::args_os())
}
