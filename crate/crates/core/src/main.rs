fn main() {
    std::process::exit(camforge::cli::run(std::env::args_os()));
}
