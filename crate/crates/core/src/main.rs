fn main() {
    std::process::exit(lto_health::cli::run(std::env::args_os()));
}
