use std::process::ExitCode;

fn main() -> ExitCode {
    poisoncert::cli::main_with(std::env::args_os())
}
