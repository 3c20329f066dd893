fn main() {
    std::process::exit(signdet::cli::run(std::env::args_os()));
}
