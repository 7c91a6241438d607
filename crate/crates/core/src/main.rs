fn main() {
    std::process::exit(emoaudionet::cli::run(std::env::args_os()));
}
