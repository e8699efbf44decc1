fn main() {
    std::process::exit(dcg::cli::run());
}
