fn main() {
    std::process::exit(hsidet_cli::run(std::env::args().collect()));
}
