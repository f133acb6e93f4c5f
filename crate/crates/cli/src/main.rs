use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let (code, text) = credit_spde_cli::run(std::env::args_os());
    let _ = std::io::stdout().write_all(text.as_bytes());
    std::process::exit(code);
}
