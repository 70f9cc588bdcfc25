use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = locvol::cli::Cli::parse();
    if let Err(e) = locvol::cli::run(cli) {
        println!("{}", locvol::cli::error_line(&e));
        std::process::exit(1);
    }
}
