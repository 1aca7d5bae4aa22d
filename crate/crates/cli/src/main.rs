use clap::Parser;
use uranker_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors exit 2 through clap.
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", e.to_line());
        std::process::exit(1);
    }
}
