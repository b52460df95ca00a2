fn main() {
    std::process::exit(gamma::cli::main_with(std::env::args_os()));
}
