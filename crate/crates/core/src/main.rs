fn main() {
    std::process::exit(onionbox::cli::run(std::env::args_os()));
}
