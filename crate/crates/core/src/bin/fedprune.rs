fn main() {
    std::process::exit(fedprune::cli::run(std::env::args_os()));
}
