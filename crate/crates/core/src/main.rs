fn main() {
    std::process::exit(fedcast::cli::run());
}
