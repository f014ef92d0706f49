use std::process::ExitCode;

fn main() -> ExitCode {
    probadapt::cli::main()
}
