fn main() {
    std::process::exit(helioseer::cli::run());
}
