fn main() {
    // Die quietly on a closed pipe (`nowcast eval | head`) instead of
    // panicking inside println!.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(nowcast::cli::cli_main(std::env::args_os()));
}
