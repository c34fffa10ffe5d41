fn main() -> std::process::ExitCode {
    embodied_rl::cli::main()
}
