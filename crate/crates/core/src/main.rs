fn main() {
    std::process::exit(expertise::cli::run(std::env::args_os()));
}
