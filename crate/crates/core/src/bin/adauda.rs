fn main() -> std::process::ExitCode {
    adauda::cli::main()
}
