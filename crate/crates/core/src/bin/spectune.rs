fn main() {
    std::process::exit(spectune::cli::run(std::env::args_os()));
}
