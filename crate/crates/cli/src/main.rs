use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = match fbdiff_cli::parse_from(std::env::args_os()) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { fbdiff_cli::EXIT_CONFIG } else { fbdiff_cli::EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match fbdiff_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(fbdiff_cli::exit_code(&e) as u8)
        }
    }
}
