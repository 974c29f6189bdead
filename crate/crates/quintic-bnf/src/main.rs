fn main() {
    std::process::exit(quintic_bnf::cli::main_with_args(std::env::args_os()));
}
