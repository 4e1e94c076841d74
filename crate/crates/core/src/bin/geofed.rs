fn main() -> std::process::ExitCode {
    geofed::cli::main_with_args(std::env::args_os())
}
