fn main() {
    std::process::exit(gpril::cli::run_from(std::env::args_os()));
}
