fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SGWSOD_LOG", "warn")).init();
    let mut stdout = std::io::stdout().lock();
    std::process::exit(sgwsod::cli::run(std::env::args_os(), &mut stdout));
}
