fn main() {
    std::process::exit(fundus2ffa::cli::run());
}
