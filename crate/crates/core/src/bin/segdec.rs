use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(segdec_core::cli::cli_run(std::env::args()) as u8)
}
