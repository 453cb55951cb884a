fn main() {
    std::process::exit(linmix_cli::cli::run(std::env::args_os()));
}
