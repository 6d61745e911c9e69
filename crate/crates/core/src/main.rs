fn main() {
    std::process::exit(olvae::cli::run(std::env::args().skip(1)));
}
