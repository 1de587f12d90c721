fn main() {
    std::process::exit(eddycorr::cli::run(std::env::args_os()));
}
