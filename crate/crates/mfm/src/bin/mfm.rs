use clap::Parser;

fn main() {
    // Die quietly when a downstream pager/head closes the pipe instead of
    // panicking on the next print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = mfm::cli::Cli::parse();
    if let Err(e) = mfm::cli::run(cli) {
        eprintln!("error: {}: {e}", e.category());
        std::process::exit(1);
    }
}
