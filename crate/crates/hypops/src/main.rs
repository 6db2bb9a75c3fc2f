fn main() {
    std::process::exit(hypops::cli::run(std::env::args_os()));
}
