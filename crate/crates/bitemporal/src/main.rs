fn main() {
    std::process::exit(bitemporal::cli::run(std::env::args_os()));
}
