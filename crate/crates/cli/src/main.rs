fn main() {
    std::process::exit(hpmatch_cli::run(std::env::args_os()));
}
