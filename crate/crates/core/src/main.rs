fn main() -> std::process::ExitCode {
    feedloop::cli::main()
}
