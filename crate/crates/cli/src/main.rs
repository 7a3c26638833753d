fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIF_LOG", "warn")).init();
    std::process::exit(sif_cli::run_command(std::env::args_os()));
}
