use std::process::ExitCode;

fn main() -> ExitCode {
    moesd::cli::main()
}
