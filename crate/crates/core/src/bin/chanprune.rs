fn main() {
    std::process::exit(chanprune::cli::dispatch(std::env::args_os()));
}
