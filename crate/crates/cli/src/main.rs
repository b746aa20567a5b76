fn main() {
    std::process::exit(estfuse_cli::cli_main(std::env::args_os()));
}
