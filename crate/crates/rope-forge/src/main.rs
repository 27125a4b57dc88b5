fn main() {
    std::process::exit(rope_forge::cli::run(std::env::args_os()));
}
