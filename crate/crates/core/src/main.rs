fn main() {
    std::process::exit(occlupaste::cli::run(std::env::args_os()));
}
