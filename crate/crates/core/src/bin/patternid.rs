use clap::Parser;

use patternid::cli::{run, Cli, EXIT_OK};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("patternid: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
