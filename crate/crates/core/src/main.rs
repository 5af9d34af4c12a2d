fn main() {
    std::process::exit(ptal::cli::run(std::env::args_os()));
}
