fn main() {
    let verbose = std::env::args().any(|a| a == "--verbose" || a == "-v");
    env_logger::Builder::new()
        .filter_level(if verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_env("ULOOP_LOG")
        .init();
    let env = |k: &str| std::env::var(k).ok();
    let code = uloop_cli::main_with(
        std::env::args(),
        &env,
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    std::process::exit(code);
}
