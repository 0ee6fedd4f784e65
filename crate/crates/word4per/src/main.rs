fn main() {
    std::process::exit(word4per::cli::main_with(std::env::args_os()));
}
