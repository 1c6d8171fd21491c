fn main() {
    std::process::exit(rsaforge::cli::run(std::env::args_os()));
}
