fn main() {
    std::process::exit(vardepth::cli::run(std::env::args_os()));
}
