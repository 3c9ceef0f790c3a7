fn main() {
    std::process::exit(ontoforge::cli::run(std::env::args_os()))
}
