fn main() {
    std::process::exit(subgc::cli::run(std::env::args_os()));
}
