fn main() {
    std::process::exit(dot_core::cli::main());
}
