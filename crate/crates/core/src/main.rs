fn main() {
    std::process::exit(tspeft::cli::run(std::env::args_os()));
}
