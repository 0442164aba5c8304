fn main() {
    std::process::exit(bioz_core::cli::run(std::env::args_os()));
}
