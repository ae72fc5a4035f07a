fn main() {
    std::process::exit(vnsde::cli::run_from(std::env::args_os()));
}
