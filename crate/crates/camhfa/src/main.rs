use std::process::ExitCode;

fn main() -> ExitCode {
    camhfa::cli::run()
}
