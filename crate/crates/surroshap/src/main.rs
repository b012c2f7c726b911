fn main() {
    std::process::exit(surroshap::cli::run());
}
