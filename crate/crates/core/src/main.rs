use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ldd_audit::cli::run(std::env::args()) as u8)
}
