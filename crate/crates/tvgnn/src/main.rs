fn main() {
    std::process::exit(tvgnn::cli::run_cli(std::env::args()));
}
