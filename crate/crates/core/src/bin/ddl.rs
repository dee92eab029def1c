fn main() -> std::process::ExitCode {
    ddl_core::cli::main()
}
