fn main() {
    std::process::exit(stratrr::cli::run(std::env::args_os()));
}
