fn main() {
    std::process::exit(texvq::cli::dispatch(std::env::args_os()));
}
