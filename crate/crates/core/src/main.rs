fn main() {
    std::process::exit(lcdh::cli::run(std::env::args_os()));
}
