fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRINE_LOG", "warn")).init();
    let code = trine::cli::main_with_args(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
