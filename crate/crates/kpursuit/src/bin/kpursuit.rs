fn main() {
    std::process::exit(kpursuit::cli::run());
}
