use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(patchsim::cli::main_with_args(std::env::args().collect()))
}
