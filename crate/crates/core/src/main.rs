fn main() {
    std::process::exit(lungfuse::cli::run(std::env::args_os()));
}
