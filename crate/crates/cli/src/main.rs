use clap::Parser;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = geolle_cli::Cli::parse();
    std::process::exit(geolle_cli::run(cli, argv));
}
