fn main() {
    std::process::exit(tsplearn::cli::run());
}
