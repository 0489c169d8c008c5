use std::process::ExitCode;

fn main() -> ExitCode {
    spectrain::cli::main_with_args(std::env::args_os())
}
