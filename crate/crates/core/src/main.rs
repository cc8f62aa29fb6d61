use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONTRAKT_LOG", "error"))
        .format_timestamp(None)
        .init();
    ExitCode::from(contrakt::cli::main_with_args(std::env::args_os()))
}
