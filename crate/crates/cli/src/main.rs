fn main() {
    std::process::exit(kvcomp_cli::cli_main(std::env::args().collect()));
}
