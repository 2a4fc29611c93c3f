fn main() {
    std::process::exit(dlam::cli::run(std::env::args_os()));
}
