fn main() -> std::process::ExitCode {
    aemlab_cli::main_with_args(std::env::args_os())
}
