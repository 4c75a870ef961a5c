fn main() {
    std::process::exit(gazefl::cli::main_with_args(std::env::args_os()));
}
