fn main() {
    std::process::exit(robocap::cli::main_with_args(std::env::args_os()));
}
