use std::process::ExitCode;

fn main() -> ExitCode {
    panelkrr::cli::main_entry()
}
