fn main() {
    std::process::exit(driftseg::cli::run(std::env::args_os()));
}
