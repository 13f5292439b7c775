fn main() {
    std::process::exit(loanscreen::cli::main_with_args(std::env::args_os()));
}
