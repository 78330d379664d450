fn main() -> std::process::ExitCode {
    rulegate::cli::main_with_args(std::env::args_os())
}
