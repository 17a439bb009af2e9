fn main() {
    std::process::exit(sentispread::cli::main_with_args(std::env::args()));
}
