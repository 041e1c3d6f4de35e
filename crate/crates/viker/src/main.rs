fn main() {
    let code = viker::cli::run_from_args(std::env::args_os());
    std::process::exit(code);
}
