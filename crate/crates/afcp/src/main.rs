use clap::Parser;

fn main() {
    let cli = afcp::cli::Cli::parse();
    if let Err(e) = afcp::cli::execute(cli) {
        // A reader closing our stdout early (predict | head) is not an error.
        if let afcp::Error::Io(io) = &e {
            if io.kind() == std::io::ErrorKind::BrokenPipe {
                return;
            }
        }
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
