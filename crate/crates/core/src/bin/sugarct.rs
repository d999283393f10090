use std::process::ExitCode;

fn main() -> ExitCode {
    sugar_ct::cli::run(std::env::args_os())
}
