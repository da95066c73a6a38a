fn main() {
    std::process::exit(tagspace::cli::run(std::env::args_os()));
}
