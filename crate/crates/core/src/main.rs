fn main() {
    std::process::exit(aura::cli::main_with(std::env::args().collect()));
}
