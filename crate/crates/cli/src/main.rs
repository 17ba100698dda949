fn main() -> std::process::ExitCode {
    edgeloc_cli::main_with_args(std::env::args_os().collect())
}
