fn main() {
    std::process::exit(esci_cli::main_with_args(std::env::args_os()));
}
