fn main() {
    std::process::exit(deltamap::cli::main_with_args(std::env::args().collect()));
}
