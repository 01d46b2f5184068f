fn main() {
    env_logger::init();
    if let Err(err) = gofnet::cli::run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
