fn main() {
    std::process::exit(spcl_cli::run(std::env::args_os()));
}
