fn main() {
    std::process::exit(mvr_cli::run(std::env::args().collect()));
}
