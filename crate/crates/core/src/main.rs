fn main() {
    std::process::exit(actionpose::cli::main_with_args(std::env::args_os()));
}
