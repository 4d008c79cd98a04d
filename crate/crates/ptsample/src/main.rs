use std::process::ExitCode;

fn main() -> ExitCode {
    // Usage errors exit with code 2 inside the parser; anything that
    // fails after parsing is a runtime error and exits with code 1.
    match ptsample::cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
