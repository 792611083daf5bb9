fn main() -> std::process::ExitCode {
    pmx::cli::main_with(std::env::args_os())
}
