use std::process::ExitCode;

fn main() -> ExitCode {
    editgate::cli::main_with_args(std::env::args_os())
}
