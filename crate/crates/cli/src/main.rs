fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEN_LOG", "error")).init();
    std::process::exit(den_cli::run_command(std::env::args_os()));
}
