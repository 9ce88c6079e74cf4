use std::process::ExitCode;

fn main() -> ExitCode {
    hairmap::cli::run(std::env::args_os())
}
