use clap::Parser;

fn main() {
    let cli = addlab_cli::Cli::parse();
    let level = if cli.command.quiet() { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    let result = addlab_cli::run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    std::process::exit(addlab_cli::exit_code(&result));
}
