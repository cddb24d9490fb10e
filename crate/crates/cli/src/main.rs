use clap::Parser;

fn main() {
    let cli = expwp_cli::Cli::parse();
    if let Some(n) = std::env::var("EXPWP_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: EXPWP_THREADS ignored: {e}");
        }
    }
    std::process::exit(expwp_cli::run(cli));
}
