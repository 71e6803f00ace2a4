fn main() {
    std::process::exit(partswitch_cli::run(std::env::args_os()));
}
