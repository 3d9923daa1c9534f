fn main() {
    std::process::exit(biomoe::cli::run(std::env::args_os()));
}
