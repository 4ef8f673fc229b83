use std::process::ExitCode;

fn main() -> ExitCode {
    dyncox::cli::run(std::env::args_os())
}
