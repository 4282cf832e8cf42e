fn main() {
    std::process::exit(ecgattr::harness::cli::cli_main(std::env::args_os()));
}
