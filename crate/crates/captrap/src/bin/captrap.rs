fn main() -> std::process::ExitCode {
    captrap::cli::main()
}
