fn main() {
    std::process::exit(persearch::cli::run());
}
