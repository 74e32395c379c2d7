use std::process::ExitCode;

fn main() -> ExitCode {
    vismem::cli::main_from_args(std::env::args_os())
}
