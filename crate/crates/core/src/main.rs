use clap::Parser;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = duovqa::cli::Cli::parse();
    let code = duovqa::cli::run(cli)?;
    std::process::exit(code);
}
