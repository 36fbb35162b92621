fn main() -> std::process::ExitCode {
    capn::cli::main_entry()
}
