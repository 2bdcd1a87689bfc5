fn main() {
    std::process::exit(graphino::cli::run(std::env::args_os()));
}
