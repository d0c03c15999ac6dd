use clap::Parser;
use ensemble_control::cli::{dispatch, Cli};

fn main() {
    let cli = Cli::parse();
    let code = dispatch(cli, &mut std::io::stdout().lock());
    std::process::exit(code);
}
