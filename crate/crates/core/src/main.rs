fn main() {
    std::process::exit(prsfda::cli::run(std::env::args_os()));
}
