fn main() {
    std::process::exit(macnet::cli::main_with_args(std::env::args()));
}
