fn main() {
    std::process::exit(finessl_cli::run(std::env::args_os()));
}
