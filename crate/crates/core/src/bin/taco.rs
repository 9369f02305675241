fn main() {
    std::process::exit(taco_rl::cli::main_with_args(std::env::args_os()));
}
