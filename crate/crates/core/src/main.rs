fn main() {
    std::process::exit(ctcloud::cli::run(std::env::args_os()));
}
