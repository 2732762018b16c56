fn main() -> std::process::ExitCode {
    hideseek::cli::main()
}
