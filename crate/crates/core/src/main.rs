fn main() -> std::process::ExitCode {
    adavae::cli::main()
}
