fn main() -> std::process::ExitCode {
    tgdial::cli::main()
}
