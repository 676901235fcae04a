use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let status = g2flow::cli::run(&args, &mut io::stdout(), &mut io::stderr());
    ExitCode::from(status as u8)
}
