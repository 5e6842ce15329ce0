use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ws_diffusion::cli::main_with_args(std::env::args_os()))
}
