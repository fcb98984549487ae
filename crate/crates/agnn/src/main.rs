use clap::Parser;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = agnn::cli::Cli::parse();
    agnn::cli::run(cli, &mut std::io::stdout().lock())
}
