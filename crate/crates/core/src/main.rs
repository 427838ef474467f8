fn main() {
    std::process::exit(iplab::interface::cli::run(std::env::args_os()));
}
