use clap::Parser;

use deepcausal::cli::{resolve_config, run, Cli};

fn main() {
    let cli = Cli::parse();
    let config = match resolve_config(&cli) {
        Ok(config) => config,
        Err(err) => fail(&err),
    };
    if let Err(err) = run(cli.command, &config) {
        fail(&err);
    }
}

fn fail(err: &deepcausal::cli::CliError) -> ! {
    // Machine-readable error on stderr, nonzero exit.
    eprintln!("{}", serde_json::json!({ "error": err.to_string() }));
    std::process::exit(1);
}
