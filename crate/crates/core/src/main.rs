use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = jjarray_core::cli::Cli::parse();
    if let Err(e) = jjarray_core::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(jjarray_core::cli::exit_code(&e));
    }
}
